//! ASCII mask files: a `MASK <rows> <cols>` header line followed by `rows`
//! lines of `cols` space-separated `0`/`1` digits.

use std::fs;
use std::path::Path;

use fusecond_core::patch_grid::RegionMask;

use crate::error::{Error, Result};

pub fn parse_mask(text: &str) -> Result<RegionMask> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty mask file".into()))?;
    let fields: Vec<&str> = header.split(' ').collect();
    let (rows, cols) = match fields[..] {
        ["MASK", r, c] => (parse_dim(r)?, parse_dim(c)?),
        _ => return Err(Error::Format(format!("bad mask header `{header}`"))),
    };
    let mut bits = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        let line =
            lines.next().ok_or_else(|| Error::Format(format!("mask ends after {row} of {rows} rows")))?;
        let before = bits.len();
        for tok in line.split(' ') {
            match tok {
                "0" => bits.push(false),
                "1" => bits.push(true),
                other => return Err(Error::Format(format!("row {row}: invalid token `{other}`"))),
            }
        }
        if bits.len() - before != cols {
            return Err(Error::Format(format!(
                "row {row} has {} values, expected {cols}",
                bits.len() - before
            )));
        }
    }
    if let Some(extra) = lines.next() {
        return Err(Error::Format(format!("unexpected content after mask rows: `{extra}`")));
    }
    Ok(RegionMask::new(rows, cols, bits)?)
}

fn parse_dim(s: &str) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 && s.bytes().all(|b| b.is_ascii_digit()) => Ok(v),
        _ => Err(Error::Format(format!("bad mask dimension `{s}`"))),
    }
}

pub fn format_mask(mask: &RegionMask) -> String {
    let mut out = format!("MASK {} {}\n", mask.height(), mask.width());
    for y in 0..mask.height() {
        let row: Vec<&str> = (0..mask.width()).map(|x| if mask.get(y, x) { "1" } else { "0" }).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<RegionMask> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mask(&text).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_mask(path: impl AsRef<Path>, mask: &RegionMask) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_mask(mask)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_formats() {
        let text = "MASK 2 3\n0 1 0\n1 1 0\n";
        let m = parse_mask(text).unwrap();
        assert!(m.get(0, 1) && m.get(1, 0) && !m.get(1, 2));
        assert_eq!(format_mask(&m), text);
    }

    #[test]
    fn rejects_other_tokens() {
        for bad in [
            "MASK 1 2\n0 2\n",
            "MASK 1 2\n0  1\n",
            "MASK 1 2\n0 1 \n",
            "MASK 1 2\n0\t1\n",
            "MASK 2 2\n0 1\n",
            "MASK 1 2\n0 1\n1 1\n",
            "MASK 1 2 3\n0 1\n",
            "mask 1 2\n0 1\n",
            "MASK 0 2\n",
            "MASK +1 2\n0 1\n",
            "",
        ] {
            assert!(parse_mask(bad).is_err(), "accepted {bad:?}");
        }
    }
}
