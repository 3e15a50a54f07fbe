//! Connectionist temporal classification.
//!
//! The blank is the last class: with an alphabet of `A` symbols, frames carry
//! `A + 1` log-probabilities and the blank index is `A`. All recursions run in
//! log space in `f64` regardless of the network precision.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Encoded transcript: symbol indices in `[0, A)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSeq(pub Vec<usize>);

impl LabelSeq {
    pub fn new(symbols: Vec<usize>) -> Self {
        LabelSeq(symbols)
    }

    pub fn symbols(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fewest frames that can emit this sequence: one per symbol plus a
    /// separating blank between equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

impl From<Vec<usize>> for LabelSeq {
    fn from(v: Vec<usize>) -> Self {
        LabelSeq(v)
    }
}

/// Per-frame class log-probabilities of one sequence, `(frames, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLogProbs {
    frames: usize,
    classes: usize,
    data: Vec<f64>,
}

impl FrameLogProbs {
    pub fn new(frames: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || classes < 2 || data.len() != frames * classes {
            return Err(Error::Shape {
                op: "frame_log_probs",
                shape: vec![frames, classes],
                reason: format!("need frames >= 1, classes >= 2 and {} values, got {}", frames * classes, data.len()),
            });
        }
        Ok(FrameLogProbs { frames, classes, data })
    }

    /// From a `(frames, classes)` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        match t.shape()[..] {
            [f, c] => Self::new(f, c, t.data().iter().map(|v| v.as_f64()).collect()),
            _ => Err(Error::Shape {
                op: "frame_log_probs",
                shape: t.shape().to_vec(),
                reason: "expected (frames, classes)".into(),
            }),
        }
    }

    /// Splits network output `(N, 1, W, C)` into per-sample sequences, keeping
    /// the first `lengths[n]` frames of each (all frames when `None`).
    pub fn batch_from_output<T: Real>(out: &Tensor<T>, lengths: Option<&[usize]>) -> Result<Vec<Self>> {
        let [n, h, w, c] = out.dims4("frame_log_probs")?;
        if h != 1 {
            return Err(Error::Dimension {
                op: "frame_log_probs",
                axis: "height",
                expected: 1,
                found: h,
            });
        }
        (0..n)
            .map(|i| {
                let frames = lengths.map_or(w, |l| l[i].min(w));
                let row = &out.data()[i * w * c..][..frames * c];
                Self::new(frames, c, row.iter().map(|v| v.as_f64()).collect())
            })
            .collect()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn blank(&self) -> usize {
        self.classes - 1
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.classes..][..self.classes]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn check_target(lp: &FrameLogProbs, target: &LabelSeq) -> Result<()> {
    let blank = lp.blank();
    if let Some(&s) = target.0.iter().find(|&&s| s >= blank) {
        return Err(Error::Dimension {
            op: "ctc",
            axis: "label",
            expected: blank,
            found: s,
        });
    }
    Ok(())
}

/// Negative log-likelihood of `target` and its gradient with respect to the
/// log-probabilities (`(frames, classes)`).
///
/// Returns [`Error::InfeasibleAlignment`] when there are fewer frames than
/// [`LabelSeq::min_frames`]. A feasible target whose probability underflows
/// yields an infinite loss with a zero gradient.
pub fn ctc_loss(lp: &FrameLogProbs, target: &LabelSeq) -> Result<(f64, Vec<f64>)> {
    check_target(lp, target)?;
    let required = target.min_frames();
    if lp.frames < required {
        return Err(Error::InfeasibleAlignment {
            frames: lp.frames,
            required,
        });
    }
    let blank = lp.blank();
    let t_len = lp.frames;
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.0.iter().flat_map(|&s| [s, blank]))
        .collect();
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    // Transition from s-2 is allowed onto a symbol different from the one two back.
    let skip: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2])
        .collect();

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp.row(0)[ext[0]];
    if s_len > 1 {
        alpha[1] = lp.row(0)[ext[1]];
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        let row = lp.row(t);
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip[s] {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + row[ext[s]] };
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let log_p = if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    if !log_p.is_finite() {
        return Ok((f64::INFINITY, vec![0.0; t_len * lp.classes]));
    }

    let mut beta = vec![ninf; t_len * s_len];
    {
        let row = lp.row(t_len - 1);
        let b = &mut beta[(t_len - 1) * s_len..];
        b[s_len - 1] = row[ext[s_len - 1]];
        if s_len > 1 {
            b[s_len - 2] = row[ext[s_len - 2]];
        }
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let next = &next[..s_len];
        let row = lp.row(t);
        for s in 0..s_len {
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && skip[s + 2] {
                b = log_add(b, next[s + 2]);
            }
            cur[s] = if b == ninf { ninf } else { b + row[ext[s]] };
        }
    }

    let c = lp.classes;
    let mut grad = vec![0.0; t_len * c];
    let mut occupancy = vec![ninf; c];
    for t in 0..t_len {
        occupancy.iter_mut().for_each(|v| *v = ninf);
        let row = lp.row(t);
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            let k = ext[s];
            occupancy[k] = log_add(occupancy[k], a + b - row[k]);
        }
        for k in 0..c {
            if occupancy[k] > ninf {
                grad[t * c + k] = -(occupancy[k] - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Mean CTC loss over a batch and the per-sample gradients scaled by `1/N`.
pub fn ctc_loss_batch(seqs: &[FrameLogProbs], targets: &[LabelSeq]) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = seqs.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(seqs.len());
    for (lp, tg) in seqs.iter().zip(targets) {
        let (loss, mut g) = ctc_loss(lp, tg)?;
        total += loss;
        g.iter_mut().for_each(|v| *v /= n);
        grads.push(g);
    }
    Ok((total / n, grads))
}

/// Reference loss by enumerating every frame path. Infinite when no path
/// collapses to `target`.
pub fn brute_force_ctc(lp: &FrameLogProbs, target: &LabelSeq) -> Result<f64> {
    check_target(lp, target)?;
    let (t_len, c) = (lp.frames, lp.classes);
    let total = (c as f64).powi(t_len as i32);
    if total > 1e7 {
        return Err(Error::SizeGuard {
            classes: c,
            frames: t_len,
        });
    }
    let mut path = vec![0usize; t_len];
    let mut prob = 0.0;
    loop {
        if collapse(&path, lp.blank()) == *target {
            prob += path
                .iter()
                .enumerate()
                .map(|(t, &k)| lp.row(t)[k])
                .sum::<f64>()
                .exp();
        }
        // Odometer increment over the path.
        let mut i = 0;
        while i < t_len {
            path[i] += 1;
            if path[i] < c {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == t_len {
            break;
        }
    }
    Ok(if prob > 0.0 { -prob.ln() } else { f64::INFINITY })
}

/// Merges adjacent duplicates, then drops blanks.
pub fn collapse(path: &[usize], blank: usize) -> LabelSeq {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if prev != Some(k) && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    LabelSeq(out)
}

/// Per-frame argmax (lowest index on ties), then [`collapse`].
pub fn greedy_decode(lp: &FrameLogProbs) -> LabelSeq {
    let path: Vec<usize> = (0..lp.frames)
        .map(|t| {
            let row = lp.row(t);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path, lp.blank())
}

/// A decoded candidate and its log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub labels: LabelSeq,
    pub score: f64,
}

#[derive(Clone, Copy, Debug)]
struct BeamState {
    log_p_blank: f64,
    log_p_nonblank: f64,
}

impl BeamState {
    const EMPTY: BeamState = BeamState {
        log_p_blank: f64::NEG_INFINITY,
        log_p_nonblank: f64::NEG_INFINITY,
    };

    fn score(&self) -> f64 {
        log_add(self.log_p_blank, self.log_p_nonblank)
    }
}

/// Descending score, then ascending label sequence.
fn rank(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

/// Prefix beam search. Returns at most `top_n` distinct sequences ordered by
/// descending log-probability; `top_n` is capped at `width`.
pub fn beam_search(lp: &FrameLogProbs, width: usize, top_n: usize) -> Vec<Hypothesis> {
    let width = width.max(1);
    let top_n = top_n.min(width);
    let blank = lp.blank();
    let mut beams: Vec<(Vec<usize>, BeamState)> = vec![(
        Vec::new(),
        BeamState {
            log_p_blank: 0.0,
            log_p_nonblank: f64::NEG_INFINITY,
        },
    )];
    for t in 0..lp.frames {
        let row = lp.row(t);
        let mut next: HashMap<Vec<usize>, BeamState> = HashMap::with_capacity(beams.len() * lp.classes);
        for (prefix, st) in &beams {
            let total = st.score();
            let e = next.entry(prefix.clone()).or_insert(BeamState::EMPTY);
            e.log_p_blank = log_add(e.log_p_blank, total + row[blank]);
            let last = prefix.last().copied();
            if let Some(l) = last {
                e.log_p_nonblank = log_add(e.log_p_nonblank, st.log_p_nonblank + row[l]);
            }
            for k in (0..lp.classes).filter(|&k| k != blank) {
                let mut ext = prefix.clone();
                ext.push(k);
                let from = if Some(k) == last { st.log_p_blank } else { total };
                let e = next.entry(ext).or_insert(BeamState::EMPTY);
                e.log_p_nonblank = log_add(e.log_p_nonblank, from + row[k]);
            }
        }
        let mut ranked: Vec<(Vec<usize>, f64)> = next.iter().map(|(p, s)| (p.clone(), s.score())).collect();
        ranked.sort_by(rank);
        ranked.truncate(width);
        beams = ranked
            .into_iter()
            .map(|(p, _)| {
                let s = next[&p];
                (p, s)
            })
            .collect();
    }
    let mut out: Vec<(Vec<usize>, f64)> = beams.into_iter().map(|(p, s)| (p, s.score())).collect();
    out.sort_by(rank);
    out.into_iter()
        .take(top_n)
        .map(|(labels, score)| Hypothesis {
            labels: LabelSeq(labels),
            score,
        })
        .collect()
}
