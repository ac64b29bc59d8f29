//! Little-endian checkpoint container.
//!
//! ```text
//! "GRNT" | u32 version | u32 len | fingerprint (UTF-8 model.* config)
//! section*: [u8; 4] tag | u64 len | payload | u32 crc32(payload)
//! ```
//!
//! Sections, in order: `WGHT` (named tensors: name, rank, dims, f32 data),
//! `ADAM`, `SCHD`, `PROG`.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::{GraNetConfig, GraNetWeights};
use crate::tensor::Tensor;

use super::adam::AdamState;
use super::scheduler::PlateauScheduler;

pub const MAGIC: &[u8; 4] = b"GRNT";
pub const FORMAT_VERSION: u32 = 1;

/// Position in a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: u32,
    /// Optimizer steps taken.
    pub step: u64,
    /// Seed from which every per-epoch generator is derived.
    pub seed: u64,
    /// Best validation PSNR so far (`-inf` before the first validation).
    pub best_psnr: f64,
    /// Epochs since `best_psnr` last improved.
    pub since_best: u32,
}

impl Progress {
    pub fn new(seed: u64) -> Self {
        Progress { epoch: 0, step: 0, seed, best_psnr: f64::NEG_INFINITY, since_best: 0 }
    }
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: GraNetConfig,
    pub weights: GraNetWeights<f32>,
    pub adam: AdamState,
    pub scheduler: PlateauScheduler,
    pub progress: Progress,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn truncated(_: std::io::Error) -> Error {
    corrupt("file is truncated")
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.write_u32::<LE>(s.len() as u32).unwrap();
    buf.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let n = r.read_u32::<LE>().map_err(truncated)? as usize;
    let mut bytes = vec![0; n];
    r.read_exact(&mut bytes).map_err(truncated)?;
    String::from_utf8(bytes).map_err(|_| corrupt("string is not UTF-8"))
}

fn put_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    buf.write_u64::<LE>(v.len() as u64).unwrap();
    for &x in v {
        buf.write_f32::<LE>(x).unwrap();
    }
}

fn get_f32s(r: &mut Cursor<&[u8]>) -> Result<Vec<f32>> {
    let n = r.read_u64::<LE>().map_err(truncated)? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if n.checked_mul(4).is_none_or(|b| b > remaining) {
        return Err(corrupt("array length exceeds the section"));
    }
    let mut v = vec![0.0; n];
    r.read_f32_into::<LE>(&mut v).map_err(truncated)?;
    Ok(v)
}

fn put_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.write_u64::<LE>(payload.len() as u64).unwrap();
    out.extend_from_slice(payload);
    out.write_u32::<LE>(crc32fast::hash(payload)).unwrap();
}

fn get_section<'a>(r: &mut Cursor<&'a [u8]>, want: &[u8; 4]) -> Result<&'a [u8]> {
    let mut tag = [0u8; 4];
    r.read_exact(&mut tag).map_err(truncated)?;
    if &tag != want {
        return Err(corrupt(format!(
            "expected section {}, found {:?}",
            String::from_utf8_lossy(want),
            String::from_utf8_lossy(&tag)
        )));
    }
    let len = r.read_u64::<LE>().map_err(truncated)?;
    let start = r.position() as usize;
    let all: &'a [u8] = r.get_ref();
    let end = start
        .checked_add(len as usize)
        .filter(|&e| e + 4 <= all.len())
        .ok_or_else(|| corrupt(format!("section {} is truncated", String::from_utf8_lossy(want))))?;
    let payload = &all[start..end];
    r.set_position(end as u64);
    let crc = r.read_u32::<LE>().map_err(truncated)?;
    if crc != crc32fast::hash(payload) {
        return Err(corrupt(format!("section {} failed its checksum", String::from_utf8_lossy(want))));
    }
    Ok(payload)
}

fn done(r: &Cursor<&[u8]>, what: &str) -> Result<()> {
    if (r.position() as usize) != r.get_ref().len() {
        return Err(corrupt(format!("trailing bytes in {what}")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LE>(FORMAT_VERSION).unwrap();
        put_str(&mut out, &self.config.to_kv());

        let mut w = Vec::new();
        w.write_u32::<LE>(self.weights.len() as u32).unwrap();
        for (name, t) in self.weights.iter() {
            put_str(&mut w, name);
            w.write_u32::<LE>(4).unwrap();
            for d in t.shape() {
                w.write_u32::<LE>(d as u32).unwrap();
            }
            for &x in t.data() {
                w.write_f32::<LE>(x).unwrap();
            }
        }
        put_section(&mut out, b"WGHT", &w);

        let a = &self.adam;
        let mut p = Vec::new();
        for x in [a.lr, a.beta1, a.beta2, a.eps] {
            p.write_f64::<LE>(x).unwrap();
        }
        p.write_u64::<LE>(a.step).unwrap();
        p.write_u32::<LE>(a.m.len() as u32).unwrap();
        for (name, m) in &a.m {
            put_str(&mut p, name);
            put_f32s(&mut p, m);
            put_f32s(&mut p, a.v.get(name).map(Vec::as_slice).unwrap_or(&[]));
        }
        put_section(&mut out, b"ADAM", &p);

        let s = &self.scheduler;
        let mut p = Vec::new();
        for x in [s.lr, s.factor, s.min_lr, s.min_delta] {
            p.write_f64::<LE>(x).unwrap();
        }
        p.write_u32::<LE>(s.patience).unwrap();
        p.write_u8(s.best.is_some() as u8).unwrap();
        p.write_f64::<LE>(s.best.unwrap_or(0.0)).unwrap();
        p.write_u32::<LE>(s.epochs_since_improve).unwrap();
        put_section(&mut out, b"SCHD", &p);

        let g = &self.progress;
        let mut p = Vec::new();
        p.write_u32::<LE>(g.epoch).unwrap();
        p.write_u64::<LE>(g.step).unwrap();
        p.write_u64::<LE>(g.seed).unwrap();
        p.write_f64::<LE>(g.best_psnr).unwrap();
        p.write_u32::<LE>(g.since_best).unwrap();
        put_section(&mut out, b"PROG", &p);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| corrupt("not a checkpoint (file too short)"))?;
        if &magic != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = r.read_u32::<LE>().map_err(truncated)?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("format version {version} is not supported (expected {FORMAT_VERSION})")));
        }
        let fingerprint = get_str(&mut r)?;
        let config = GraNetConfig::from_kv(&fingerprint)
            .map_err(|e| corrupt(format!("stored configuration is invalid: {e}")))?;

        let mut s = Cursor::new(get_section(&mut r, b"WGHT")?);
        let count = s.read_u32::<LE>().map_err(truncated)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = get_str(&mut s)?;
            let rank = s.read_u32::<LE>().map_err(truncated)?;
            if rank != 4 {
                return Err(corrupt(format!("`{name}` has rank {rank}, expected 4")));
            }
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = s.read_u32::<LE>().map_err(truncated)? as usize;
            }
            let n: usize = shape.iter().product();
            let remaining = s.get_ref().len() - s.position() as usize;
            if n.checked_mul(4).is_none_or(|b| b > remaining) {
                return Err(corrupt(format!("`{name}` data is truncated")));
            }
            let mut data = vec![0.0f32; n];
            s.read_f32_into::<LE>(&mut data).map_err(truncated)?;
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        done(&s, "WGHT")?;
        let weights = GraNetWeights::from_tensors(&config, tensors)?;

        let mut s = Cursor::new(get_section(&mut r, b"ADAM")?);
        let mut f = [0.0; 4];
        for x in &mut f {
            *x = s.read_f64::<LE>().map_err(truncated)?;
        }
        let mut adam = AdamState::new(f[0], f[1], f[2], f[3]);
        adam.step = s.read_u64::<LE>().map_err(truncated)?;
        let count = s.read_u32::<LE>().map_err(truncated)?;
        for _ in 0..count {
            let name = get_str(&mut s)?;
            let m = get_f32s(&mut s)?;
            let v = get_f32s(&mut s)?;
            let expect = weights.get(&name).map(|t| t.len());
            if expect != Some(m.len()) || m.len() != v.len() {
                return Err(corrupt(format!("optimizer moments for `{name}` do not match the weights")));
            }
            adam.m.insert(name.clone(), m);
            adam.v.insert(name, v);
        }
        done(&s, "ADAM")?;

        let mut s = Cursor::new(get_section(&mut r, b"SCHD")?);
        let mut f = [0.0; 4];
        for x in &mut f {
            *x = s.read_f64::<LE>().map_err(truncated)?;
        }
        let patience = s.read_u32::<LE>().map_err(truncated)?;
        let has_best = s.read_u8().map_err(truncated)? != 0;
        let best = s.read_f64::<LE>().map_err(truncated)?;
        let since = s.read_u32::<LE>().map_err(truncated)?;
        done(&s, "SCHD")?;
        let scheduler = PlateauScheduler {
            lr: f[0],
            factor: f[1],
            min_lr: f[2],
            patience,
            min_delta: f[3],
            best: has_best.then_some(best),
            epochs_since_improve: since,
        };

        let mut s = Cursor::new(get_section(&mut r, b"PROG")?);
        let progress = Progress {
            epoch: s.read_u32::<LE>().map_err(truncated)?,
            step: s.read_u64::<LE>().map_err(truncated)?,
            seed: s.read_u64::<LE>().map_err(truncated)?,
            best_psnr: s.read_f64::<LE>().map_err(truncated)?,
            since_best: s.read_u32::<LE>().map_err(truncated)?,
        };
        done(&s, "PROG")?;
        done(&r, "file")?;
        Ok(Checkpoint { config, weights, adam, scheduler, progress })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads and refuses a checkpoint built for a different configuration.
    pub fn load_for(path: &Path, config: &GraNetConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config != *config {
            return Err(Error::FingerprintMismatch { expected: config.to_kv(), found: ck.config.to_kv() });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GraNetConfig {
        GraNetConfig {
            coarse_channels: [4, 6, 8],
            dense_layers: 2,
            dense_growth: 3,
            fine_channels: 4,
            fine_dense_blocks: 2,
            merge_k: 4,
            ..GraNetConfig::default()
        }
    }

    fn sample() -> Checkpoint {
        let config = small();
        let weights = GraNetWeights::init(&config, 3).unwrap();
        let mut adam = AdamState::new(5e-4, 0.9, 0.999, 1e-8);
        adam.step = 17;
        for (name, t) in weights.iter().take(3) {
            adam.m.insert(name.to_string(), t.data().iter().map(|v| v * 0.5).collect());
            adam.v.insert(name.to_string(), t.data().iter().map(|v| v * v).collect());
        }
        let mut scheduler = PlateauScheduler::new(5e-4, 0.9, 1e-4, 3).with_min_delta(0.05);
        scheduler.step(21.5);
        scheduler.step(21.0);
        let progress = Progress { epoch: 4, step: 17, seed: 99, best_psnr: 21.5, since_best: 1 };
        Checkpoint { config, weights, adam, scheduler, progress }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.grnt");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        assert_eq!(Checkpoint::load_for(&p, &small()).unwrap(), ck);
    }

    #[test]
    fn fresh_state_round_trips() {
        let config = small();
        let ck = Checkpoint {
            weights: GraNetWeights::init(&config, 0).unwrap(),
            config,
            adam: AdamState::new(5e-4, 0.9, 0.999, 1e-8),
            scheduler: PlateauScheduler::new(5e-4, 0.9, 1e-4, 3),
            progress: Progress::new(0),
        };
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn corrupted_bytes_are_detected() {
        let bytes = sample().to_bytes();
        let header = 12 + small().to_kv().len();
        for pos in (header..bytes.len()).step_by(101) {
            let mut b = bytes.clone();
            b[pos] ^= 0x40;
            assert!(Checkpoint::from_bytes(&b).is_err(), "flip at {pos}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).unwrap_err().to_string().contains("magic"));
        let mut b = sample().to_bytes();
        b[4] = 9;
        assert!(Checkpoint::from_bytes(&b).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn different_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.grnt");
        sample().save(&p).unwrap();
        let other = GraNetConfig { use_ra: false, ..small() };
        let err = Checkpoint::load_for(&p, &other).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch { .. }));
        assert!(err.is_usage());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ck = sample();
        let wide = GraNetWeights::init(&GraNetConfig { fine_channels: 8, ..small() }, 0).unwrap();
        ck.weights = wide;
        let err = Checkpoint::from_bytes(&ck.to_bytes()).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
