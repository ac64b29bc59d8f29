use rand::Rng;

use crate::data::ImagePair;

/// Flips both images of the pair horizontally with probability `p`.
pub fn augment<R: Rng + ?Sized>(pair: &ImagePair, rng: &mut R, p: f64) -> ImagePair {
    if rng.random_bool(p) {
        pair.flipped()
    } else {
        pair.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{procedural_scene, synth_rain, RainParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair() -> ImagePair {
        let clean = procedural_scene(12, 17, 1);
        let (rainy, _) = synth_rain(&clean, &RainParams { seed: 1, ..RainParams::default() });
        ImagePair::new("p", rainy, clean).unwrap()
    }

    #[test]
    fn forced_flip_twice_is_identity() {
        let p = pair();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = augment(&p, &mut rng, 1.0);
        assert_ne!(once, p);
        assert_eq!(augment(&once, &mut rng, 1.0), p);
        assert_eq!(augment(&p, &mut rng, 0.0), p);
    }

    #[test]
    fn images_flip_together() {
        let p = pair();
        let flipped = p.flipped();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = augment(&p, &mut rng, 0.5);
            let rainy_flipped = a.rainy == flipped.rainy;
            let clean_flipped = a.clean == flipped.clean;
            assert_eq!(rainy_flipped, clean_flipped);
            assert!(rainy_flipped || (a.rainy == p.rainy && a.clean == p.clean));
        }
    }

    #[test]
    fn flip_rate_is_one_half() {
        use crate::data::ImageF32;
        let img = ImageF32::new(1, 2, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let p = ImagePair::new("tiny", img.clone(), img).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hits = (0..10_000).filter(|_| augment(&p, &mut rng, 0.5).rainy.data[0] == 1.0).count();
        let rate = hits as f64 / 1e4;
        assert!((0.48..=0.52).contains(&rate), "{rate}");
    }
}
