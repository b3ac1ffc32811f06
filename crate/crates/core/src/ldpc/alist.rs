use std::path::Path;

use super::{LdpcError, ParityCheckMatrix, Result};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AlistError {
    #[error("line {line}: malformed alist: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: degree mismatch: header declares {expected}, found {found}")]
    DegreeMismatch { line: usize, expected: usize, found: usize },
    #[error("line {line}: index {index} out of range 1..={max}")]
    OutOfRange { line: usize, index: usize, max: usize },
    #[error("column and row lists disagree: {0}")]
    Inconsistent(String),
}

pub fn load_alist(path: &Path) -> Result<ParityCheckMatrix> {
    let text = std::fs::read_to_string(path)?;
    parse_alist(&text)
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last: usize,
}

impl<'a> Lines<'a> {
    /// Next non-blank line as integers, with its 1-based line number.
    fn next_ints(&mut self, what: &str) -> std::result::Result<(usize, Vec<usize>), AlistError> {
        loop {
            let Some((i, l)) = self.inner.next() else {
                return Err(AlistError::Malformed { line: self.last + 1, msg: format!("unexpected end of file, expected {what}") });
            };
            self.last = i + 1;
            if l.trim().is_empty() {
                continue;
            }
            let vals = l
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| AlistError::Malformed { line: i + 1, msg: format!("{what}: {e}") })?;
            return Ok((i + 1, vals));
        }
    }

    fn exact(&mut self, count: usize, what: &str) -> std::result::Result<(usize, Vec<usize>), AlistError> {
        let (line, v) = self.next_ints(what)?;
        if v.len() != count {
            return Err(AlistError::Malformed { line, msg: format!("{what}: expected {count} values, found {}", v.len()) });
        }
        Ok((line, v))
    }
}

/// Parse MacKay's alist format. Adjacency lines may be zero padded up to the
/// maximum degree or list exactly the declared entries.
pub fn parse_alist(text: &str) -> Result<ParityCheckMatrix> {
    parse_inner(text).map_err(LdpcError::from).and_then(|(n, rows)| ParityCheckMatrix::from_row_adjacency(n, rows))
}

fn parse_inner(text: &str) -> std::result::Result<(usize, Vec<Vec<usize>>), AlistError> {
    let mut lines = Lines { inner: text.lines().enumerate().peekable(), last: 0 };
    let (_, nm) = lines.exact(2, "dimensions")?;
    let (n, m) = (nm[0], nm[1]);
    if n == 0 || m == 0 {
        return Err(AlistError::Malformed { line: lines.last, msg: "zero dimension".into() });
    }
    let (maxline, maxes) = lines.exact(2, "maximum degrees")?;
    let (col_max, row_max) = (maxes[0], maxes[1]);
    let (cl, col_deg) = lines.exact(n, "column degrees")?;
    let (rl, row_deg) = lines.exact(m, "row degrees")?;
    if let Some(&d) = col_deg.iter().find(|&&d| d > col_max) {
        return Err(AlistError::DegreeMismatch { line: cl, expected: col_max, found: d });
    }
    if let Some(&d) = row_deg.iter().find(|&&d| d > row_max) {
        return Err(AlistError::DegreeMismatch { line: rl, expected: row_max, found: d });
    }
    if col_deg.iter().max() != Some(&col_max) || row_deg.iter().max() != Some(&row_max) {
        return Err(AlistError::Malformed { line: maxline, msg: "maximum degrees do not match degree lists".into() });
    }

    let read_lists = |lines: &mut Lines, degs: &[usize], range: usize, what: &str| {
        let mut out = Vec::with_capacity(degs.len());
        for &d in degs {
            let (line, vals) = lines.next_ints(what)?;
            let mut entries = Vec::with_capacity(d);
            for &x in &vals {
                if x == 0 {
                    continue;
                }
                if x > range {
                    return Err(AlistError::OutOfRange { line, index: x, max: range });
                }
                entries.push(x - 1);
            }
            if entries.len() != d {
                return Err(AlistError::DegreeMismatch { line, expected: d, found: entries.len() });
            }
            out.push(entries);
        }
        Ok(out)
    };
    let cols = read_lists(&mut lines, &col_deg, m, "column list")?;
    let rows = read_lists(&mut lines, &row_deg, n, "row list")?;

    let mut from_cols: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (c, checks) in cols.iter().enumerate() {
        for &r in checks {
            from_cols[r].push(c);
        }
    }
    for (r, (a, b)) in from_cols.iter_mut().zip(&rows).enumerate() {
        let mut b = b.clone();
        a.sort_unstable();
        b.sort_unstable();
        if *a != b {
            return Err(AlistError::Inconsistent(format!("check {}", r + 1)));
        }
    }
    Ok((n, rows))
}

/// Serialize in alist format with zero padding.
pub fn to_alist(h: &ParityCheckMatrix) -> String {
    let col_deg: Vec<usize> = (0..h.cols()).map(|c| h.col(c).len()).collect();
    let row_deg: Vec<usize> = (0..h.rows()).map(|r| h.row(r).len()).collect();
    let (cmax, rmax) = (*col_deg.iter().max().unwrap_or(&0), *row_deg.iter().max().unwrap_or(&0));
    let join = |v: &mut dyn Iterator<Item = usize>| v.map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let mut s = format!("{} {}\n{} {}\n", h.cols(), h.rows(), cmax, rmax);
    s += &join(&mut col_deg.iter().copied());
    s.push('\n');
    s += &join(&mut row_deg.iter().copied());
    s.push('\n');
    for c in 0..h.cols() {
        let mut v: Vec<usize> = h.col(c).iter().map(|&r| r + 1).collect();
        v.resize(cmax, 0);
        s += &join(&mut v.into_iter());
        s.push('\n');
    }
    for r in 0..h.rows() {
        let mut v: Vec<usize> = h.row(r).iter().map(|&c| c + 1).collect();
        v.resize(rmax, 0);
        s += &join(&mut v.into_iter());
        s.push('\n');
    }
    s
}
