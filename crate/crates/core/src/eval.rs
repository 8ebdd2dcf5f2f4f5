//! Phoneme error rate, boundary accuracy, codebook projection and
//! attention-alignment summaries.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::ctc::PhonemeSequence;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PerReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
    pub per: f64,
}

impl PerReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn finish(mut self) -> Self {
        self.per = self.errors() as f64 / self.ref_len as f64;
        self
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Edit {
    Match,
    Sub,
    Ins,
    Del,
}

/// Levenshtein alignment of `hyp` against `reference`.
///
/// Among minimal decompositions the backtrace prefers a substitution, then
/// an insertion, then a deletion.
pub fn phoneme_error_rate(reference: &PhonemeSequence, hyp: &PhonemeSequence) -> Result<PerReport> {
    if reference.is_empty() {
        return Err(Error::Usage("empty reference sequence".into()));
    }
    let (r, h) = (reference.ids(), hyp.ids());
    let (n, m) = (r.len(), h.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = diag.min(d[i][j - 1] + 1).min(d[i - 1][j] + 1);
        }
    }
    let mut report = PerReport {
        ref_len: n,
        ..PerReport::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let edit = if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            if r[i - 1] == h[j - 1] {
                Edit::Match
            } else {
                Edit::Sub
            }
        } else if j > 0 && d[i][j] == d[i][j - 1] + 1 {
            Edit::Ins
        } else {
            Edit::Del
        };
        match edit {
            Edit::Match => {}
            Edit::Sub => report.substitutions += 1,
            Edit::Ins => report.insertions += 1,
            Edit::Del => report.deletions += 1,
        }
        match edit {
            Edit::Match | Edit::Sub => {
                i -= 1;
                j -= 1;
            }
            Edit::Ins => j -= 1,
            Edit::Del => i -= 1,
        }
    }
    debug_assert_eq!(report.errors(), d[n][m]);
    Ok(report.finish())
}

/// Error counts summed over all pairs, PER relative to the total reference length.
pub fn corpus_per<'a>(
    pairs: impl IntoIterator<Item = (&'a PhonemeSequence, &'a PhonemeSequence)>,
) -> Result<PerReport> {
    let mut total = PerReport::default();
    for (r, h) in pairs {
        let one = phoneme_error_rate(r, h)?;
        total.substitutions += one.substitutions;
        total.deletions += one.deletions;
        total.insertions += one.insertions;
        total.ref_len += one.ref_len;
    }
    if total.ref_len == 0 {
        return Err(Error::Usage("no reference sequences to score".into()));
    }
    Ok(total.finish())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoundaryScore {
    pub matched: usize,
    pub predicted: usize,
    pub reference: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl BoundaryScore {
    /// Precision is 1 with no predictions and recall is 1 with no
    /// reference boundaries.
    fn finish(mut self) -> Self {
        self.precision = if self.predicted == 0 {
            1.0
        } else {
            self.matched as f64 / self.predicted as f64
        };
        self.recall = if self.reference == 0 {
            1.0
        } else {
            self.matched as f64 / self.reference as f64
        };
        let s = self.precision + self.recall;
        self.f1 = if s == 0.0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / s
        };
        self
    }

    pub fn merge(&mut self, other: &BoundaryScore) {
        self.matched += other.matched;
        self.predicted += other.predicted;
        self.reference += other.reference;
        *self = self.finish();
    }
}

/// Greedy in-order matching: each predicted boundary claims the earliest
/// unmatched reference boundary within `tolerance` frames.
pub fn boundary_f1(predicted: &[usize], reference: &[usize], tolerance: usize) -> BoundaryScore {
    let mut pred = predicted.to_vec();
    pred.sort_unstable();
    let mut truth = reference.to_vec();
    truth.sort_unstable();
    let mut used = vec![false; truth.len()];
    let mut matched = 0;
    for &b in &pred {
        if let Some(k) = (0..truth.len()).find(|&k| !used[k] && b.abs_diff(truth[k]) <= tolerance) {
            used[k] = true;
            matched += 1;
        }
    }
    BoundaryScore {
        matched,
        predicted: pred.len(),
        reference: truth.len(),
        ..BoundaryScore::default()
    }
    .finish()
}

/// Two-component principal projection fitted on the rows of a matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Two unit-length directions, largest variance first.
    pub axes: [Vec<f64>; 2],
    pub degenerate: bool,
}

impl Pca2 {
    pub fn fit(rows: &Tensor<f64>) -> Result<Self> {
        let [n, d] = rows.shape();
        if n == 0 {
            return Err(Error::dim("pca", "no rows"));
        }
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| rows.get(i, j)).sum::<f64>() / n as f64)
            .collect();
        let centered = DMatrix::from_fn(n, d, |i, j| rows.get(i, j) - mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let scale = cov.diagonal().iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
        if scale <= 1e-24 {
            log::warn!("degenerate covariance: all rows are equal, projecting to zeros");
            return Ok(Self {
                mean,
                axes: [vec![0.0; d], vec![0.0; d]],
                degenerate: true,
            });
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let axis = |k: usize| -> Vec<f64> {
            match order.get(k) {
                Some(&c) => eig.eigenvectors.column(c).iter().copied().collect(),
                None => vec![0.0; d],
            }
        };
        let mut pca = Self {
            mean,
            axes: [axis(0), axis(1)],
            degenerate: false,
        };
        // sign convention: each component's largest-magnitude coordinate over the fitted rows is positive
        let projected = pca.project_raw(rows);
        for c in 0..2 {
            let pivot = projected
                .iter()
                .map(|p| p[c])
                .fold(0.0_f64, |best, v| if v.abs() > best.abs() { v } else { best });
            if pivot < 0.0 {
                pca.axes[c].iter_mut().for_each(|v| *v = -*v);
            }
        }
        Ok(pca)
    }

    fn project_raw(&self, rows: &Tensor<f64>) -> Vec<[f64; 2]> {
        rows.iter_rows()
            .map(|r| {
                let mut out = [0.0; 2];
                for (c, axis) in self.axes.iter().enumerate() {
                    out[c] = r
                        .iter()
                        .zip(&self.mean)
                        .zip(axis)
                        .map(|((x, m), a)| (x - m) * a)
                        .sum();
                }
                out
            })
            .collect()
    }

    pub fn project(&self, rows: &Tensor<f64>) -> Result<Vec<[f64; 2]>> {
        if rows.cols() != self.mean.len() {
            return Err(Error::dim(
                "pca",
                format!("{} columns, fitted on {}", rows.cols(), self.mean.len()),
            ));
        }
        Ok(self.project_raw(rows))
    }
}

/// Labelled 2-D coordinates for every codebook entry.
pub fn export_codebook_2d(entries: &Tensor<f64>, labels: &[String]) -> Result<Vec<(String, f64, f64)>> {
    if entries.rows() < 3 {
        return Err(Error::Usage(format!(
            "projection needs at least 3 entries, got {}",
            entries.rows()
        )));
    }
    if labels.len() != entries.rows() {
        return Err(Error::dim(
            "export_codebook_2d",
            format!("{} labels for {} entries", labels.len(), entries.rows()),
        ));
    }
    let pca = Pca2::fit(entries)?;
    Ok(labels
        .iter()
        .cloned()
        .zip(pca.project(entries)?)
        .map(|(l, [x, y])| (l, x, y))
        .collect())
}

fn nearest(points: &[[f64; 2]], q: [f64; 2]) -> usize {
    let d = |p: &[f64; 2]| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if d(p) < d(&points[best]) {
            best = i;
        }
    }
    best
}

/// Units whose codeword and data centroid are each other's nearest
/// neighbour across the two point sets. Returns one flag per unit.
pub fn mutual_nearest(codewords: &[[f64; 2]], centroids: &[[f64; 2]]) -> Vec<bool> {
    (0..codewords.len().min(centroids.len()))
        .map(|u| nearest(centroids, codewords[u]) == u && nearest(codewords, centroids[u]) == u)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentSummary {
    /// G×G average of resized, row-normalized alignments.
    pub average: Tensor<f64>,
    pub diagonal_mass: f64,
    /// Alignments that contributed (empty ones are skipped).
    pub count: usize,
}

/// Bilinear resampling to `g`×`g` with corner pixels aligned.
pub fn resize_bilinear(m: &Tensor<f64>, g: usize) -> Tensor<f64> {
    let [rows, cols] = m.shape();
    let coord = |i: usize, n: usize| -> (usize, usize, f64) {
        if n == 1 || g == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n - 1) as f64 / (g - 1) as f64;
        let lo = (x.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, x - lo as f64)
    };
    Tensor::from_fn(g, g, |i, j| {
        let (r0, r1, fr) = coord(i, rows);
        let (c0, c1, fc) = coord(j, cols);
        let top = m.get(r0, c0) * (1.0 - fc) + m.get(r0, c1) * fc;
        let bottom = m.get(r1, c0) * (1.0 - fc) + m.get(r1, c1) * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

/// Average alignment on a `g`×`g` grid and the mean row mass within the
/// band `|i − j| ≤ g/10`.
pub fn alignment_summary(alignments: &[Tensor<f64>], g: usize) -> Result<AlignmentSummary> {
    if g < 2 {
        return Err(Error::Usage("grid size must be at least 2".into()));
    }
    let mut average = Tensor::zeros(g, g);
    let mut count = 0;
    for a in alignments.iter().filter(|a| !a.is_empty()) {
        let mut r = resize_bilinear(a, g);
        for i in 0..g {
            let s: f64 = r.row_slice(i).iter().sum();
            if s > 0.0 {
                for j in 0..g {
                    r.set(i, j, r.get(i, j) / s);
                }
            }
        }
        average.add_assign(&r);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data("no non-empty alignments to summarize".into()));
    }
    average.scale_in_place(1.0 / count as f64);
    let band = g / 10;
    let diagonal_mass = (0..g)
        .map(|i| {
            (0..g)
                .filter(|&j| i.abs_diff(j) <= band)
                .map(|j| average.get(i, j))
                .sum::<f64>()
        })
        .sum::<f64>()
        / g as f64;
    Ok(AlignmentSummary {
        average,
        diagonal_mass,
        count,
    })
}
