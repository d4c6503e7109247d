//! Dynamic time warping between silent and vocal frame sequences, and the
//! conversion of an alignment path into per-input-frame durations.
//!
//! Indices are 0-based here; the path runs from `(0, 0)` to `(N-1, M-1)`
//! with steps `(1,0)`, `(0,1)` and `(1,1)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::matrix::{euclidean, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPath {
    pairs: Vec<(usize, usize)>,
    total_cost: f64,
}

impl AlignmentPath {
    /// Checks the boundary and step rules.
    pub fn new(pairs: Vec<(usize, usize)>, total_cost: f64, n: usize, m: usize) -> Result<Self> {
        validate_path(&pairs, n, m)?;
        Ok(Self { pairs, total_cost })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn total_cost(&self) -> f64 {
        self.total_cost
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn validate_path(pairs: &[(usize, usize)], n: usize, m: usize) -> Result<()> {
    if n == 0 || m == 0 {
        return Err(invalid("alignment over an empty sequence"));
    }
    if pairs.first() != Some(&(0, 0)) || pairs.last() != Some(&(n - 1, m - 1)) {
        return Err(invalid(format!(
            "path must run from (0,0) to ({}, {})",
            n - 1,
            m - 1
        )));
    }
    for w in pairs.windows(2) {
        let (di, dj) = (w[1].0.wrapping_sub(w[0].0), w[1].1.wrapping_sub(w[0].1));
        if di > 1 || dj > 1 || di + dj == 0 {
            return Err(invalid(format!("illegal step {:?} -> {:?}", w[0], w[1])));
        }
    }
    Ok(())
}

/// Durations `d[i]`: number of output frames assigned to input frame `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DurationSequence(Vec<usize>);

impl DurationSequence {
    pub fn new(d: Vec<usize>) -> Self {
        Self(d)
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1; n])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

/// DTW over an arbitrary local cost. Backtracking breaks ties in the order
/// diagonal, then `(i, j-1)`, then `(i-1, j)`.
pub fn dtw_with_cost<F>(n: usize, m: usize, mut cost: F) -> Result<AlignmentPath>
where
    F: FnMut(usize, usize) -> f64,
{
    if n == 0 || m == 0 {
        return Err(invalid("DTW needs non-empty sequences"));
    }
    let mut acc = vec![f64::INFINITY; n * m];
    let idx = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        for j in 0..m {
            let c = cost(i, j);
            if !c.is_finite() {
                return Err(Error::NonFinite(format!("DTW local cost at ({i}, {j})")));
            }
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let mut b = f64::INFINITY;
                if i > 0 && j > 0 {
                    b = b.min(acc[idx(i - 1, j - 1)]);
                }
                if j > 0 {
                    b = b.min(acc[idx(i, j - 1)]);
                }
                if i > 0 {
                    b = b.min(acc[idx(i - 1, j)]);
                }
                b
            };
            acc[idx(i, j)] = c + best;
        }
    }

    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        let mut next = None;
        let mut best = f64::INFINITY;
        let candidates = [
            (i > 0 && j > 0).then(|| (i - 1, j - 1)),
            (j > 0).then(|| (i, j - 1)),
            (i > 0).then(|| (i - 1, j)),
        ];
        for (ci, cj) in candidates.into_iter().flatten() {
            let v = acc[idx(ci, cj)];
            if v < best {
                best = v;
                next = Some((ci, cj));
            }
        }
        (i, j) = next.expect("a predecessor always exists off the origin");
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(AlignmentPath {
        pairs,
        total_cost: acc[idx(n - 1, m - 1)],
    })
}

fn check_widths(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(invalid("DTW needs non-empty sequences"));
    }
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "DTW feature widths differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    Ok(())
}

/// Euclidean frame-distance DTW between `x_silent` (N frames) and
/// `x_vocal` (M frames).
pub fn dtw_basic(x_silent: &Matrix, x_vocal: &Matrix) -> Result<AlignmentPath> {
    check_widths(x_silent, x_vocal)?;
    dtw_with_cost(x_silent.rows(), x_vocal.rows(), |i, j| {
        euclidean(x_silent.row(i), x_vocal.row(j))
    })
}

/// DTW with the model-refined cost
/// `||X[i] - x[j]|| + lambda * ||Y_hat[i] - Y[j]||`, where `mel_pred` is the
/// model output at input resolution (N frames) and `mel_target` the target
/// mel (M frames).
pub fn dtw_refined(
    x_silent: &Matrix,
    x_vocal: &Matrix,
    mel_pred: &Matrix,
    mel_target: &Matrix,
    lambda_align: f64,
) -> Result<AlignmentPath> {
    check_widths(x_silent, x_vocal)?;
    check_widths(mel_pred, mel_target)?;
    if mel_pred.rows() != x_silent.rows() || mel_target.rows() != x_vocal.rows() {
        return Err(Error::Shape(format!(
            "refined DTW frame counts: features {}x{}, mels {}x{}",
            x_silent.rows(),
            x_vocal.rows(),
            mel_pred.rows(),
            mel_target.rows()
        )));
    }
    if !(lambda_align >= 0.0) {
        return Err(invalid("lambda_align must be non-negative"));
    }
    if lambda_align == 0.0 {
        return dtw_basic(x_silent, x_vocal);
    }
    dtw_with_cost(x_silent.rows(), x_vocal.rows(), |i, j| {
        euclidean(x_silent.row(i), x_vocal.row(j))
            + lambda_align * euclidean(mel_pred.row(i), mel_target.row(j))
    })
}

/// `A[j]` is the largest input index paired with output frame `j`;
/// `d[i]` counts the output frames with `A[j] == i`.
pub fn path_to_durations(path: &AlignmentPath, n: usize, m: usize) -> Result<DurationSequence> {
    validate_path(path.pairs(), n, m)?;
    let mut a = vec![0usize; m];
    for &(i, j) in path.pairs() {
        a[j] = a[j].max(i);
    }
    Ok(durations_from_assignment(&a, n))
}

pub fn durations_from_assignment(a: &[usize], n: usize) -> DurationSequence {
    let mut d = vec![0usize; n];
    for &i in a {
        d[i] += 1;
    }
    DurationSequence(d)
}

/// Text format: one `id: d1 d2 ... dN` line per utterance.
pub fn write_durations(path: &Path, table: &BTreeMap<String, DurationSequence>) -> Result<()> {
    let mut out = String::new();
    for (id, d) in table {
        out.push_str(id);
        out.push(':');
        for v in d.as_slice() {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_durations(path: &Path) -> Result<BTreeMap<String, DurationSequence>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line.split_once(':').ok_or_else(|| Error::Parse {
            line: ln + 1,
            msg: "expected `id: d1 d2 ...`".into(),
        })?;
        let d = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>().map_err(|e| Error::Parse {
                    line: ln + 1,
                    msg: format!("bad duration `{t}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        table.insert(id.trim().to_string(), DurationSequence(d));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Matrix {
        Matrix::from_vec(v.len(), 1, v.to_vec())
    }

    #[test]
    fn identical_sequences_align_diagonally() {
        let x = Matrix::from_rows(&[[0.0, 1.0], [3.0, -1.0], [2.0, 2.0]]);
        let p = dtw_basic(&x, &x).unwrap();
        assert_eq!(p.pairs(), &[(0, 0), (1, 1), (2, 2)]);
        assert_eq!(p.total_cost(), 0.0);
        assert_eq!(path_to_durations(&p, 3, 3).unwrap().as_slice(), &[1, 1, 1]);
    }

    #[test]
    fn small_worked_example() {
        let p = dtw_basic(&col(&[0.0, 2.0, 4.0]), &col(&[0.0, 1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(p.total_cost(), 2.0);
        assert_eq!(p.pairs(), &[(0, 0), (0, 1), (1, 2), (1, 3), (2, 4)]);
        let d = path_to_durations(&p, 3, 5).unwrap();
        assert_eq!(d.as_slice(), &[2, 2, 1]);
    }

    #[test]
    fn single_input_frame_covers_everything() {
        let p = dtw_basic(&col(&[1.0]), &col(&[0.0, 5.0, 2.0, 1.0])).unwrap();
        assert_eq!(p.pairs(), &[(0, 0), (0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn vertical_runs_drop_frames() {
        let d = durations_from_assignment(&[1, 1, 1], 3);
        assert_eq!(d.as_slice(), &[0, 3, 0]);
        let p = AlignmentPath::new(vec![(0, 0), (1, 0), (2, 0)], 0.0, 3, 1).unwrap();
        assert_eq!(path_to_durations(&p, 3, 1).unwrap().as_slice(), &[0, 0, 1]);
    }

    #[test]
    fn refined_reductions() {
        let x = col(&[0.0, 2.0, 4.0]);
        let y = col(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let mp = Matrix::from_rows(&[[1.0, 2.0], [0.5, 0.1], [3.0, 3.0]]);
        let mt = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]]);
        let basic = dtw_basic(&x, &y).unwrap();
        assert_eq!(dtw_refined(&x, &y, &mp, &mt, 0.0).unwrap(), basic);
        let cp = Matrix::from_rows(&[[1.0, 1.0]; 3]);
        let ct = Matrix::from_rows(&[[1.0, 1.0]; 5]);
        assert_eq!(dtw_refined(&x, &y, &cp, &ct, 10.0).unwrap().pairs(), basic.pairs());
    }

    #[test]
    fn error_paths() {
        let e = Matrix::zeros(0, 1);
        assert!(dtw_basic(&e, &col(&[1.0])).is_err());
        assert!(dtw_basic(&col(&[1.0]), &Matrix::zeros(2, 2)).is_err());
        let x = col(&[0.0, 1.0]);
        assert!(dtw_refined(&x, &x, &col(&[0.0]), &x, 1.0).is_err());
        assert!(AlignmentPath::new(vec![(0, 0), (2, 1)], 0.0, 3, 2).is_err());
        assert!(AlignmentPath::new(vec![(0, 0), (0, 0), (1, 1)], 0.0, 2, 2).is_err());
        assert!(AlignmentPath::new(vec![(0, 1), (1, 1)], 0.0, 2, 2).is_err());
    }

    #[test]
    fn durations_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("durations.txt");
        let mut t = BTreeMap::new();
        t.insert("utt001".to_string(), DurationSequence::new(vec![2, 0, 1]));
        t.insert("utt002".to_string(), DurationSequence::new(vec![1]));
        write_durations(&path, &t).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "utt001: 2 0 1\nutt002: 1\n");
        assert_eq!(read_durations(&path).unwrap(), t);
        fs::write(&path, "x: 1 a\n").unwrap();
        assert!(read_durations(&path).is_err());
    }
}
