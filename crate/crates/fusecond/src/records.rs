//! Plain-text artifact records: token provenance, index selections and
//! per-source strengths.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use fusecond_core::fusion::{SourceId, TokenKind, TokenProvenance};

use crate::error::{Error, Result};

/// `PROVENANCE <rows>` then one `<row> <source> <kind> <index|->` line per fused row.
pub fn format_provenance(rows: &[TokenProvenance]) -> String {
    let mut out = format!("PROVENANCE {}\n", rows.len());
    for (i, p) in rows.iter().enumerate() {
        let index = p.index.map_or_else(|| "-".to_string(), |v| v.to_string());
        let _ = writeln!(out, "{i} {} {} {index}", p.source, p.kind);
    }
    out
}

pub fn parse_provenance(text: &str) -> Result<Vec<TokenProvenance>> {
    let mut lines = text.lines();
    let count: usize = lines
        .next()
        .and_then(|h| h.strip_prefix("PROVENANCE "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Format("bad provenance header".into()))?;
    let mut rows = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let bad = || Error::Format(format!("bad provenance line `{line}`"));
        let f: Vec<&str> = line.split(' ').collect();
        let [row, source, kind, index] = f[..] else { return Err(bad()) };
        if row.parse::<usize>().ok() != Some(i) {
            return Err(bad());
        }
        let source: SourceId = source.parse().map_err(|_| bad())?;
        let kind = match kind {
            "CLS" => TokenKind::Cls,
            "REG" => TokenKind::Reg,
            "PATCH" => TokenKind::Patch,
            _ => return Err(bad()),
        };
        let index = match index {
            "-" => None,
            v => Some(v.parse().map_err(|_| bad())?),
        };
        rows.push(TokenProvenance { source, kind, index });
    }
    if rows.len() != count {
        return Err(Error::Format(format!("provenance lists {} rows, header says {count}", rows.len())));
    }
    Ok(rows)
}

/// A named index set over `[0, bound)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexRecord {
    pub bound: usize,
    pub indices: Vec<usize>,
}

/// One `<name> <bound> <count>: <indices...>` line per set, in name order.
pub fn format_selections(sets: &BTreeMap<String, IndexRecord>) -> String {
    let mut out = String::new();
    for (name, rec) in sets {
        let _ = write!(out, "{name} {} {}:", rec.bound, rec.indices.len());
        for i in &rec.indices {
            let _ = write!(out, " {i}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_selections(text: &str) -> Result<BTreeMap<String, IndexRecord>> {
    let mut sets = BTreeMap::new();
    for line in text.lines() {
        let bad =
            || Error::Format(format!("bad selection line `{}`", line.chars().take(60).collect::<String>()));
        let (head, body) = line.split_once(':').ok_or_else(bad)?;
        let h: Vec<&str> = head.split(' ').collect();
        let [name, bound, count] = h[..] else { return Err(bad()) };
        let bound: usize = bound.parse().map_err(|_| bad())?;
        let count: usize = count.parse().map_err(|_| bad())?;
        let indices = body
            .split_whitespace()
            .map(|v| v.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let ordered = indices.windows(2).all(|w| w[0] < w[1]) && indices.last().is_none_or(|&l| l < bound);
        if indices.len() != count || !ordered {
            return Err(bad());
        }
        if sets.insert(name.to_string(), IndexRecord { bound, indices }).is_some() {
            return Err(Error::Format(format!("selection `{name}` listed twice")));
        }
    }
    Ok(sets)
}

/// `<source> = <value>` lines.
pub fn format_lambdas(lambdas: &BTreeMap<SourceId, f64>) -> String {
    lambdas.iter().map(|(id, v)| format!("{id} = {v}\n")).collect()
}

pub fn parse_lambdas(text: &str) -> Result<BTreeMap<SourceId, f64>> {
    text.lines()
        .map(|line| {
            let bad = || Error::Format(format!("bad lambda line `{line}`"));
            let (k, v) = line.split_once(" = ").ok_or_else(bad)?;
            Ok((k.parse().map_err(|_| bad())?, v.parse().map_err(|_| bad())?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provenance_round_trip() {
        let rows = vec![
            TokenProvenance { source: SourceId::Local(0), kind: TokenKind::Cls, index: None },
            TokenProvenance { source: SourceId::Local(0), kind: TokenKind::Reg, index: Some(0) },
            TokenProvenance { source: SourceId::Global, kind: TokenKind::Patch, index: Some(17) },
        ];
        let text = format_provenance(&rows);
        assert_eq!(text.lines().nth(3), Some("2 global PATCH 17"));
        assert_eq!(parse_provenance(&text).unwrap(), rows);
        assert!(parse_provenance("PROVENANCE 2\n0 global CLS -\n").is_err());
    }

    #[test]
    fn selections_round_trip_and_validate() {
        let mut sets = BTreeMap::new();
        sets.insert("unaligned".to_string(), IndexRecord { bound: 10, indices: vec![1, 4, 9] });
        sets.insert("empty".to_string(), IndexRecord { bound: 3, indices: vec![] });
        let text = format_selections(&sets);
        assert!(text.contains("unaligned 10 3: 1 4 9\n"));
        assert_eq!(parse_selections(&text).unwrap(), sets);
        assert!(parse_selections("a 3 2: 2 1\n").is_err());
        assert!(parse_selections("a 3 1: 3\n").is_err());
        assert!(parse_selections("a 3 2: 1\n").is_err());
    }

    #[test]
    fn lambdas_round_trip() {
        let mut l = BTreeMap::new();
        l.insert(SourceId::Local(1), 1.75);
        l.insert(SourceId::Global, 1.0);
        assert_eq!(parse_lambdas(&format_lambdas(&l)).unwrap(), l);
    }
}
