//! FASTA records and fixed-precision number formatting.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Formats `x` like C's `%.12g`.
pub fn format_g12(x: f64) -> String {
    format_g(x, 12)
}

pub fn format_g(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let p = digits.max(1);
    let sci = format!("{:.*e}", p - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= p as i32 {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FastaRecord {
    pub name: String,
    pub seq: String,
}

pub fn read_fasta<R: BufRead>(reader: R) -> Result<Vec<FastaRecord>> {
    let mut out: Vec<FastaRecord> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end();
        if let Some(header) = line.strip_prefix('>') {
            let name = header.split_whitespace().next().unwrap_or("").to_string();
            out.push(FastaRecord { name, seq: String::new() });
        } else if !line.trim().is_empty() {
            let rec = out
                .last_mut()
                .ok_or_else(|| Error::Fasta(format!("line {}: sequence data before the first header", lineno + 1)))?;
            rec.seq.extend(line.chars().filter(|c| !c.is_whitespace()));
        }
    }
    Ok(out)
}

pub fn write_fasta<W: Write>(mut w: W, records: &[FastaRecord], width: usize) -> Result<()> {
    for r in records {
        writeln!(w, ">{}", r.name)?;
        if r.seq.is_empty() {
            continue;
        }
        let bytes = r.seq.as_bytes();
        for chunk in bytes.chunks(width.max(1)) {
            w.write_all(chunk)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Quotes a CSV field when it contains a separator, quote or line break.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g12_matches_printf() {
        assert_eq!(format_g12(1.0), "1");
        assert_eq!(format_g12(0.1), "0.1");
        assert_eq!(format_g12(1.0 / 3.0), "0.333333333333");
        assert_eq!(format_g12(1e-7), "1e-07");
        assert_eq!(format_g12(123456789012345.0), "1.23456789012e+14");
        assert_eq!(format_g12(-2.5e-5), "-2.5e-05");
        assert_eq!(format_g12(0.0001), "0.0001");
        assert_eq!(format_g12(999999999999.9), "1e+12");
        assert_eq!(format_g12(-7.538e-6), "-7.538e-06");
    }

    #[test]
    fn fasta_round_trip() {
        let recs = vec![
            FastaRecord { name: "X1".into(), seq: "ACGTACGT".into() },
            FastaRecord { name: "X2".into(), seq: String::new() },
            FastaRecord { name: "X3".into(), seq: "GG".into() },
        ];
        let mut buf = Vec::new();
        write_fasta(&mut buf, &recs, 3).unwrap();
        let back = read_fasta(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
        assert!(read_fasta("ACGT\n".as_bytes()).is_err());
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }
}
