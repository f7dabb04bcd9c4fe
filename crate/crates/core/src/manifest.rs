//! Line-oriented text records shared by every human-readable artifact.
//!
//! Each line is `tag [positional...] [key=value...]`. Lines starting with `#`
//! and blank lines are ignored. Values never contain whitespace.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::QuantParams;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Record {
    pub tag: String,
    pub args: Vec<String>,
    pub kv: BTreeMap<String, String>,
    pub line: usize,
}

impl Record {
    pub fn new(tag: &str) -> Self {
        Self {
            tag: tag.to_string(),
            ..Default::default()
        }
    }

    pub fn arg(mut self, v: impl fmt::Display) -> Self {
        self.args.push(v.to_string());
        self
    }

    pub fn set(mut self, k: &str, v: impl fmt::Display) -> Self {
        self.kv.insert(k.to_string(), v.to_string());
        self
    }

    pub fn get(&self, k: &str) -> Result<&str> {
        self.kv
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("line {}: `{}` lacks key `{k}`", self.line, self.tag)))
    }

    pub fn parse<T: FromStr>(&self, k: &str) -> Result<T> {
        let raw = self.get(k)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("line {}: bad value `{raw}` for `{k}`", self.line)))
    }

    pub fn parse_arg<T: FromStr>(&self, i: usize) -> Result<T> {
        let raw = self
            .args
            .get(i)
            .ok_or_else(|| Error::Format(format!("line {}: `{}` lacks argument {i}", self.line, self.tag)))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("line {}: bad argument `{raw}`", self.line)))
    }

    pub fn parse_args<T: FromStr>(&self) -> Result<Vec<T>> {
        (0..self.args.len()).map(|i| self.parse_arg(i)).collect()
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag)?;
        for a in &self.args {
            write!(f, " {a}")?;
        }
        for (k, v) in &self.kv {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

pub fn parse_records(text: &str) -> Vec<Record> {
    text.lines()
        .enumerate()
        .filter_map(|(i, line)| {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                return None;
            }
            let mut tokens = line.split_whitespace();
            let mut rec = Record::new(tokens.next()?);
            rec.line = i + 1;
            for tok in tokens {
                match tok.split_once('=') {
                    Some((k, v)) => {
                        rec.kv.insert(k.to_string(), v.to_string());
                    }
                    None => rec.args.push(tok.to_string()),
                }
            }
            Some(rec)
        })
        .collect()
}

pub fn write_records<'a>(records: impl IntoIterator<Item = &'a Record>) -> String {
    let mut out = String::new();
    for r in records {
        writeln!(out, "{r}").unwrap();
    }
    out
}

/// Checks the leading `MAGIC version` record and returns the remaining records.
pub fn expect_header<'a>(records: &'a [Record], magic: &str, version: u32) -> Result<&'a [Record]> {
    let Some(first) = records.first() else {
        return Err(Error::Truncated("empty manifest".into()));
    };
    if first.tag != magic {
        return Err(Error::Format(format!("bad magic `{}`, expected `{magic}`", first.tag)));
    }
    let v: u32 = first.parse_arg(0)?;
    if v != version {
        return Err(Error::Format(format!("unsupported {magic} version {v}")));
    }
    Ok(&records[1..])
}

/// Compact `s8:11:0` form (signedness, width, fraction bits, zero-point).
pub fn format_qparams(q: &QuantParams) -> String {
    format!(
        "{}{}:{}:{}",
        if q.signed { 's' } else { 'u' },
        q.bit_width,
        q.fraction_bits,
        q.zero_point
    )
}

pub fn parse_qparams(s: &str) -> Result<QuantParams> {
    let bad = || Error::Format(format!("bad quantization parameters `{s}`"));
    let signed = match s.chars().next() {
        Some('s') => true,
        Some('u') => false,
        _ => return Err(bad()),
    };
    let mut parts = s[1..].split(':');
    let mut next = || parts.next().ok_or_else(bad);
    let bits: u32 = next()?.parse().map_err(|_| bad())?;
    let f: i32 = next()?.parse().map_err(|_| bad())?;
    let z: i32 = next()?.parse().map_err(|_| bad())?;
    QuantParams::new(f, z, bits, signed)
}

pub fn format_list<T: fmt::Display>(items: &[T], sep: char) -> String {
    let mut s = String::new();
    for (i, v) in items.iter().enumerate() {
        if i > 0 {
            s.push(sep);
        }
        write!(s, "{v}").unwrap();
    }
    s
}

pub fn parse_list<T: FromStr>(s: &str, sep: char) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(sep)
        .map(|t| t.parse().map_err(|_| Error::Format(format!("bad list item `{t}`"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let r = Record::new("node").arg(3).set("name", "enc0.conv_a").set("kind", "conv2d");
        let text = write_records([&r]);
        let parsed = parse_records(&text);
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].tag, "node");
        assert_eq!(parsed[0].parse_arg::<usize>(0).unwrap(), 3);
        assert_eq!(parsed[0].get("name").unwrap(), "enc0.conv_a");
    }

    #[test]
    fn qparams_text() {
        let q = QuantParams::unsigned(12, 7, 8);
        assert_eq!(format_qparams(&q), "u8:12:7");
        assert_eq!(parse_qparams("u8:12:7").unwrap(), q);
        assert_eq!(parse_qparams("s8:-3:0").unwrap(), QuantParams::symmetric(-3, 8));
        assert!(parse_qparams("x8:1:0").is_err());
        assert!(parse_qparams("s8:1").is_err());
    }

    #[test]
    fn header_checks() {
        assert!(matches!(expect_header(&[], "FCNQ1", 1), Err(Error::Truncated(_))));
        let recs = parse_records("HSC9 1\n");
        assert!(matches!(expect_header(&recs, "FCNQ1", 1), Err(Error::Format(_))));
        let recs = parse_records("FCNQ1 2\n");
        assert!(expect_header(&recs, "FCNQ1", 1).is_err());
    }
}
