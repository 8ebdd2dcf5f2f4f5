//! Connectionist temporal classification over per-frame unit posteriors.
//!
//! The loss uses the usual blank-interleaved target of length `2S + 1`:
//! blanks are optional between different labels and mandatory between
//! equal adjacent labels. All recursions run in the log domain.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{argmax, log_add, Scalar, Tensor, Var};

/// Blank-free sequence of unit ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhonemeSequence(pub Vec<usize>);

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, blank_index: usize) -> Result<Self> {
        if ids.contains(&blank_index) {
            return Err(Error::Data(format!(
                "unit sequence contains the blank id {blank_index}"
            )));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Adjacent equal pairs; each forces one extra blank frame.
    pub fn adjacent_repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Fewest frames any alignment of this target needs.
    pub fn min_frames(&self) -> usize {
        self.len() + self.adjacent_repeats()
    }

    /// Space-separated ids, as used in CSV files.
    pub fn to_field(&self) -> String {
        self.0
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse_field(field: &str) -> Result<Self> {
        field
            .split_whitespace()
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::Data(format!("bad unit id {s:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

pub struct CtcResult<'t, S: Scalar> {
    /// ln P(target | frames), a 1×1 variable; always ≤ 0.
    pub log_likelihood: Var<'t, S>,
    /// The T×V log posteriors the likelihood was computed from.
    pub log_posteriors: Var<'t, S>,
}

fn extended_target(target: &PhonemeSequence, blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &id in target.ids() {
        ext.push(id);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn validate(
    rows: usize,
    vocab: usize,
    target: &PhonemeSequence,
    blank: usize,
) -> Result<()> {
    if blank >= vocab {
        return Err(Error::dim(
            "ctc",
            format!("blank {blank} outside vocabulary of {vocab}"),
        ));
    }
    for &id in target.ids() {
        if id >= vocab || id == blank {
            return Err(Error::Data(format!(
                "target id {id} invalid for vocabulary {vocab} with blank {blank}"
            )));
        }
    }
    if rows < target.min_frames() || rows == 0 {
        return Err(Error::InfeasibleTarget {
            labels: target.len(),
            repeats: target.adjacent_repeats(),
            needed: target.min_frames().max(1),
            frames: rows,
        });
    }
    Ok(())
}

/// Forward variables α[t][s] (log), emissions at t included.
fn forward<S: Scalar>(logp: &Tensor<S>, ext: &[usize], blank: usize) -> Vec<Vec<S>> {
    let (t_len, l) = (logp.rows(), ext.len());
    let ninf = S::neg_infinity();
    let mut alpha = vec![vec![ninf; l]; t_len];
    alpha[0][0] = logp.get(0, ext[0]);
    if l > 1 {
        alpha[0][1] = logp.get(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..l {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if can_skip(ext, s, blank) {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            if acc != ninf {
                alpha[t][s] = acc + logp.get(t, ext[s]);
            }
        }
    }
    alpha
}

/// Backward variables β[t][s] (log), emissions after t only.
fn backward<S: Scalar>(logp: &Tensor<S>, ext: &[usize], blank: usize) -> Vec<Vec<S>> {
    let (t_len, l) = (logp.rows(), ext.len());
    let ninf = S::neg_infinity();
    let mut beta = vec![vec![ninf; l]; t_len];
    beta[t_len - 1][l - 1] = S::zero();
    if l > 1 {
        beta[t_len - 1][l - 2] = S::zero();
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..l {
            let mut acc = beta[t + 1][s] + logp.get(t + 1, ext[s]);
            if s + 1 < l {
                acc = log_add(acc, beta[t + 1][s + 1] + logp.get(t + 1, ext[s + 1]));
            }
            if s + 2 < l && can_skip(ext, s + 2, blank) {
                acc = log_add(acc, beta[t + 1][s + 2] + logp.get(t + 1, ext[s + 2]));
            }
            beta[t][s] = acc;
        }
    }
    beta
}

fn total_from_alpha<S: Scalar>(alpha: &[Vec<S>]) -> S {
    let last = &alpha[alpha.len() - 1];
    let l = last.len();
    if l > 1 {
        log_add(last[l - 1], last[l - 2])
    } else {
        last[0]
    }
}

/// Plain log-likelihood without recording (decoding, evaluation).
pub fn ctc_log_likelihood_value<S: Scalar>(
    log_posteriors: &Tensor<S>,
    target: &PhonemeSequence,
    blank: usize,
) -> Result<S> {
    validate(log_posteriors.rows(), log_posteriors.cols(), target, blank)?;
    let ext = extended_target(target, blank);
    Ok(total_from_alpha(&forward(log_posteriors, &ext, blank)))
}

/// ln P(target | frames) summed over every alignment that collapses to
/// `target`, differentiable w.r.t. the T×V log posteriors.
pub fn ctc_log_likelihood<'t, S: Scalar>(
    log_posteriors: Var<'t, S>,
    target: &PhonemeSequence,
    blank: usize,
) -> Result<CtcResult<'t, S>> {
    let logp = log_posteriors.value();
    validate(logp.rows(), logp.cols(), target, blank)?;
    let ext = extended_target(target, blank);
    let alpha = forward(&logp, &ext, blank);
    let total = total_from_alpha(&alpha);
    if !total.is_finite() {
        return Err(Error::Numeric { op: "ctc" });
    }
    let beta = backward(&logp, &ext, blank);

    // d total / d logp[t][k] = Σ_{s: ext[s]=k} exp(α_t(s) + β_t(s) - total)
    let mut grad = Tensor::zeros(logp.rows(), logp.cols());
    for t in 0..logp.rows() {
        for (s, &k) in ext.iter().enumerate() {
            let w = alpha[t][s] + beta[t][s];
            if w != S::neg_infinity() {
                grad.set(t, k, grad.get(t, k) + (w - total).exp());
            }
        }
    }
    let log_likelihood = log_posteriors
        .tape()
        .record_scalar(log_posteriors, total, grad, "ctc")?;
    Ok(CtcResult {
        log_likelihood,
        log_posteriors,
    })
}

/// Collapses repeats, then drops blanks.
pub fn collapse(frame_ids: &[usize], blank: usize) -> PhonemeSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &id in frame_ids {
        if Some(id) != prev && id != blank {
            out.push(id);
        }
        prev = Some(id);
    }
    PhonemeSequence(out)
}

/// Per-frame argmax followed by [`collapse`]. Works on probabilities or
/// log probabilities alike.
pub fn greedy_decode<S: Scalar>(posteriors: &Tensor<S>, blank: usize) -> PhonemeSequence {
    let ids: Vec<usize> = posteriors.iter_rows().map(argmax).collect();
    collapse(&ids, blank)
}

#[derive(Clone, Copy)]
struct BeamScore<S> {
    blank: S,
    non_blank: S,
}

impl<S: Scalar> BeamScore<S> {
    fn empty() -> Self {
        Self {
            blank: S::neg_infinity(),
            non_blank: S::neg_infinity(),
        }
    }

    fn total(&self) -> S {
        log_add(self.blank, self.non_blank)
    }
}

/// Prefix beam search over collapsed label sequences.
///
/// `log_posteriors` is T×V in the log domain. Hypotheses that collapse to
/// the same prefix are merged, tracking blank- and label-ending mass
/// separately. The surviving prefixes are rescored exactly and the most
/// probable one is returned with its log probability.
pub fn beam_decode_scored<S: Scalar>(
    log_posteriors: &Tensor<S>,
    blank: usize,
    beam_width: usize,
) -> Result<(PhonemeSequence, S)> {
    if beam_width == 0 {
        return Err(Error::Usage("beam width must be at least 1".into()));
    }
    if blank >= log_posteriors.cols() {
        return Err(Error::dim("beam_decode", "blank outside vocabulary"));
    }
    let mut beams: BTreeMap<Vec<usize>, BeamScore<S>> = BTreeMap::new();
    beams.insert(
        Vec::new(),
        BeamScore {
            blank: S::zero(),
            non_blank: S::neg_infinity(),
        },
    );
    for row in log_posteriors.iter_rows() {
        let mut next: BTreeMap<Vec<usize>, BeamScore<S>> = BTreeMap::new();
        for (prefix, score) in &beams {
            for (k, &lp) in row.iter().enumerate() {
                if k == blank {
                    let e = next.entry(prefix.clone()).or_insert_with(BeamScore::empty);
                    e.blank = log_add(e.blank, score.total() + lp);
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(k);
                if prefix.last() == Some(&k) {
                    // repeat without blank stays on the same prefix
                    let same = next.entry(prefix.clone()).or_insert_with(BeamScore::empty);
                    same.non_blank = log_add(same.non_blank, score.non_blank + lp);
                    let e = next.entry(extended).or_insert_with(BeamScore::empty);
                    e.non_blank = log_add(e.non_blank, score.blank + lp);
                } else {
                    let e = next.entry(extended).or_insert_with(BeamScore::empty);
                    e.non_blank = log_add(e.non_blank, score.total() + lp);
                }
            }
        }
        let mut ranked: Vec<(Vec<usize>, BeamScore<S>)> = next.into_iter().collect();
        // stable sort keeps lexicographic order among equal scores
        ranked.sort_by(|a, b| {
            b.1.total()
                .partial_cmp(&a.1.total())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        // zero-mass prefixes are unreachable; the top entry is kept so the beam never empties
        let mut keep = 0;
        ranked.retain(|(_, s)| {
            keep += 1;
            keep == 1 || s.total() > S::neg_infinity()
        });
        ranked.truncate(beam_width);
        beams = ranked.into_iter().collect();
    }
    // surviving prefixes are rescored with their exact total probability
    let mut best: Option<(Vec<usize>, S)> = None;
    for prefix in beams.into_keys() {
        let seq = PhonemeSequence(prefix);
        let score = ctc_log_likelihood_value(log_posteriors, &seq, blank)?;
        if best.as_ref().is_none_or(|(_, b)| score > *b) {
            best = Some((seq.0, score));
        }
    }
    let (best, score) = best.expect("beam never empty");
    Ok((PhonemeSequence(best), score))
}

pub fn beam_decode<S: Scalar>(
    log_posteriors: &Tensor<S>,
    blank: usize,
    beam_width: usize,
) -> Result<PhonemeSequence> {
    beam_decode_scored(log_posteriors, blank, beam_width).map(|(seq, _)| seq)
}

/// Exhaustive CTC probability by enumerating every length-T label path.
/// Exponential; test oracle only.
#[doc(hidden)]
pub fn enumerate_probability(probs: &Tensor<f64>, target: &PhonemeSequence, blank: usize) -> f64 {
    let (t_len, v) = (probs.rows(), probs.cols());
    let mut path = vec![0usize; t_len];
    let mut total = 0.0;
    loop {
        if collapse(&path, blank) == *target {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &k)| probs.get(t, k))
                .product::<f64>();
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == t_len {
                return total;
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}
