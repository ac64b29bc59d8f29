//! Line-based `key = value` configuration dialect.
//!
//! ```text
//! # comment
//! model.fine_channels = 64
//! train.lr = 5e-4   # trailing comments are allowed
//! ```

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    /// 1-based source line.
    pub line: usize,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`, got `{content}`")))?;
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::Config(format!("line {line}: invalid key `{key}`")));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config(format!(
                "line {line}: key `{key}` already set on line {}",
                prev.line
            )));
        }
        out.push(Entry {
            key: key.to_string(),
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

/// Parses `e.value` as `T`, naming the key and line on failure.
pub fn value<T: FromStr>(e: &Entry) -> Result<T>
where
    T::Err: Display,
{
    e.value.parse().map_err(|err| {
        Error::Config(format!("line {}: bad value `{}` for `{}`: {err}", e.line, e.value, e.key))
    })
}

/// Comma-separated list.
pub fn list<T: FromStr>(e: &Entry) -> Result<Vec<T>>
where
    T::Err: Display,
{
    e.value
        .split(',')
        .map(|s| {
            s.trim().parse().map_err(|err| {
                Error::Config(format!("line {}: bad list item `{}` for `{}`: {err}", e.line, s.trim(), e.key))
            })
        })
        .collect()
}

/// `lo..hi` or a single value meaning `lo = hi`.
pub fn range<T: FromStr + Copy + PartialOrd + Display>(e: &Entry) -> Result<(T, T)>
where
    T::Err: Display,
{
    let parse = |s: &str| {
        s.trim().parse::<T>().map_err(|err| {
            Error::Config(format!("line {}: bad range `{}` for `{}`: {err}", e.line, e.value, e.key))
        })
    };
    let (lo, hi) = match e.value.split_once("..") {
        Some((a, b)) => (parse(a)?, parse(b)?),
        None => {
            let v = parse(&e.value)?;
            (v, v)
        }
    };
    if lo > hi {
        return Err(Error::Config(format!(
            "line {}: range `{}` for `{}` has lo > hi",
            e.line, e.value, e.key
        )));
    }
    Ok((lo, hi))
}

pub(crate) fn unknown(e: &Entry) -> Error {
    Error::UnknownKey {
        key: e.key.clone(),
        line: e.line,
    }
}
