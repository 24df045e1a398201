//! Attention diagnostics and translation metrics: locality entropy, gate
//! importance, clipped n-gram precision, corpus BLEU and paired bootstrap.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AttnDump;
use crate::numerics::RngState;

/// How heads are reduced before computing locality entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadReduction {
    /// Average the heads' distributions, then take the entropy.
    #[default]
    AverageThenEntropy,
    /// Entropy of each head, then average.
    EntropyThenAverage,
}

/// Per-layer `[m][n]` attention rows of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceAttn {
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl SentenceAttn {
    pub fn from_dump(d: &AttnDump) -> Self {
        SentenceAttn {
            layers: d
                .layers
                .iter()
                .map(|l| l.attn.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect())
                .collect(),
        }
    }
}

/// Base-2 entropy of a row after renormalizing it; `0·log 0 = 0`. A row whose
/// support carries equal mass gives `log2 k` exactly.
pub fn row_entropy(row: &[f64]) -> f64 {
    let z: f64 = row.iter().sum();
    if z <= 0.0 {
        return 0.0;
    }
    let mut support = row.iter().filter(|&&p| p > 0.0);
    let first = support.next().copied();
    if first.is_some_and(|f| support.clone().all(|&p| p == f)) {
        return ((support.count() + 1) as f64).log2();
    }
    -row.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let q = p / z;
            q * q.log2()
        })
        .sum::<f64>()
}

/// Running mean; exact when every value is equal.
fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut m = 0.0;
    let mut k = 0usize;
    for x in xs {
        k += 1;
        m += (x - m) / k as f64;
    }
    (k > 0).then_some(m)
}

/// Mean row entropy over all layers and target positions, in bits.
pub fn locality_entropy(sent: &SentenceAttn) -> Result<f64> {
    let rows: Vec<&Vec<f64>> = sent.layers.iter().flatten().collect();
    if rows.is_empty() || rows.iter().any(|r| r.is_empty()) {
        return Err(Error::InvalidArgument("locality entropy of an empty sentence".into()));
    }
    Ok(mean(rows.iter().map(|r| row_entropy(r))).expect("non-empty"))
}

/// Locality entropy of a dump under the chosen head reduction.
pub fn dump_locality_entropy(d: &AttnDump, mode: HeadReduction) -> Result<f64> {
    match mode {
        HeadReduction::AverageThenEntropy => locality_entropy(&SentenceAttn::from_dump(d)),
        HeadReduction::EntropyThenAverage => {
            let mut total = 0.0;
            let mut count = 0usize;
            for l in &d.layers {
                let heads = l.heads.as_ref().ok_or_else(|| {
                    Error::Data("per-head entropy needs per-head attention in the dump".into())
                })?;
                for row_idx in 0..l.attn.len() {
                    let e: f64 = heads
                        .iter()
                        .map(|h| row_entropy(&h[row_idx].iter().map(|&x| x as f64).collect::<Vec<_>>()))
                        .sum();
                    total += e / heads.len() as f64;
                    count += 1;
                }
            }
            if count == 0 || d.src_len == 0 {
                return Err(Error::InvalidArgument("locality entropy of an empty sentence".into()));
            }
            Ok(total / count as f64)
        }
    }
}

/// Unweighted mean of sentence-level values.
pub fn corpus_le(sentence_les: &[f64]) -> Result<f64> {
    if sentence_les.is_empty() {
        return Err(Error::InvalidArgument("corpus locality entropy of an empty corpus".into()));
    }
    Ok(mean(sentence_les.iter().copied()).expect("non-empty"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    /// 1-based decoder layer.
    pub layer: usize,
    /// Mean of `1 − g`; `None` for layers without a gate.
    pub importance: Option<f64>,
}

/// Mean local-branch weight `1 − g` per layer over every sentence and
/// target position.
pub fn gate_importance(dumps: &[AttnDump]) -> Result<Vec<LayerImportance>> {
    let num_layers = dumps
        .first()
        .map(|d| d.layers.len())
        .ok_or_else(|| Error::InvalidArgument("no attention dumps".into()))?;
    let mut out = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut gated = false;
        for d in dumps {
            let layer = d
                .layers
                .get(l)
                .ok_or_else(|| Error::Data("dumps disagree on the number of layers".into()))?;
            if let Some(g) = &layer.gate {
                gated = true;
                sum += g.iter().map(|&x| 1.0 - x as f64).sum::<f64>();
                n += g.len();
            }
        }
        out.push(LayerImportance {
            layer: l + 1,
            importance: (gated && n > 0).then(|| sum / n as f64),
        });
    }
    Ok(out)
}

/// Clipped n-gram match counts of one sentence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NgramCounts {
    pub matched: usize,
    pub total: usize,
}

impl NgramCounts {
    pub fn precision(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

fn ngrams<T: Eq + Hash>(xs: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && xs.len() >= n {
        for w in xs.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn ngram_counts<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> NgramCounts {
    let h = ngrams(hyp, n);
    let r = ngrams(reference, n);
    NgramCounts {
        matched: h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum(),
        total: if n == 0 { 0 } else { (hyp.len() + 1).saturating_sub(n) },
    }
}

/// Modified (clipped) n-gram precision of one sentence.
pub fn ngram_precision<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("n-gram order must be at least 1".into()));
    }
    Ok(ngram_counts(hyp, reference, n).precision())
}

fn check_corpus<A, B>(hyps: &[A], refs: &[B]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    Ok(())
}

/// Corpus precision: clipped matches summed over sentences divided by the
/// summed hypothesis n-gram counts.
pub fn corpus_ngram_precision<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], n: usize) -> Result<f64> {
    check_corpus(hyps, refs)?;
    if n == 0 {
        return Err(Error::InvalidArgument("n-gram order must be at least 1".into()));
    }
    let (m, t) = hyps.iter().zip(refs).fold((0, 0), |(m, t), (h, r)| {
        let c = ngram_counts(h, r, n);
        (m + c.matched, t + c.total)
    });
    Ok(NgramCounts { matched: m, total: t }.precision())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionDelta {
    pub n: usize,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

/// Corpus precision of system `a` minus that of `b` for each `n` in `ns`.
pub fn precision_deltas<T: Eq + Hash>(
    a: &[Vec<T>],
    b: &[Vec<T>],
    refs: &[Vec<T>],
    ns: std::ops::RangeInclusive<usize>,
) -> Result<Vec<PrecisionDelta>> {
    ns.map(|n| {
        let pa = corpus_ngram_precision(a, refs, n)?;
        let pb = corpus_ngram_precision(b, refs, n)?;
        Ok(PrecisionDelta {
            n,
            a: pa,
            b: pb,
            delta: pa - pb,
        })
    })
    .collect()
}

const BLEU_N: usize = 4;

/// Sufficient statistics of BLEU-4 for one sentence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matched: [usize; BLEU_N],
    pub total: [usize; BLEU_N],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn of<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=BLEU_N {
            let c = ngram_counts(hyp, reference, n);
            s.matched[n - 1] = c.matched;
            s.total[n - 1] = c.total;
        }
        s
    }

    fn add(&mut self, o: &BleuStats) {
        for i in 0..BLEU_N {
            self.matched[i] += o.matched[i];
            self.total[i] += o.total[i];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// BLEU-4 in `[0, 100]`, unsmoothed. Orders for which the hypotheses
    /// contain no n-gram at all are left out of the geometric mean.
    pub fn score(&self) -> f64 {
        let orders: Vec<usize> = (0..BLEU_N).filter(|&i| self.total[i] > 0).collect();
        if orders.is_empty() || orders.iter().any(|&i| self.matched[i] == 0) {
            return 0.0;
        }
        let log_p: f64 = orders
            .iter()
            .map(|&i| (self.matched[i] as f64 / self.total[i] as f64).ln())
            .sum::<f64>()
            / orders.len() as f64;
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * log_p.exp()
    }
}

fn sum_stats<'a>(it: impl Iterator<Item = &'a BleuStats>) -> BleuStats {
    let mut s = BleuStats::default();
    for x in it {
        s.add(x);
    }
    s
}

/// Corpus BLEU-4 with corpus-level counts and brevity penalty.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let stats: Vec<BleuStats> = hyps.iter().zip(refs).map(|(h, r)| BleuStats::of(h, r)).collect();
    Ok(sum_stats(stats.iter()).score())
}

/// Paired bootstrap resampling. Returns the fraction of resampled corpora on
/// which `a` does not beat `b` (`BLEU(a) ≤ BLEU(b)`), i.e. a one-sided
/// p-value for "a is better than b".
pub fn paired_bootstrap<T: Eq + Hash>(
    a: &[Vec<T>],
    b: &[Vec<T>],
    refs: &[Vec<T>],
    resamples: usize,
    seed: u64,
) -> Result<f64> {
    check_corpus(a, refs)?;
    check_corpus(b, refs)?;
    if resamples < 100 {
        return Err(Error::InvalidArgument(format!("{resamples} resamples; need at least 100")));
    }
    let sa: Vec<BleuStats> = a.iter().zip(refs).map(|(h, r)| BleuStats::of(h, r)).collect();
    let sb: Vec<BleuStats> = b.iter().zip(refs).map(|(h, r)| BleuStats::of(h, r)).collect();
    let mut rng = RngState::new(seed);
    let n = refs.len();
    let mut not_better = 0usize;
    for _ in 0..resamples {
        let idx: Vec<usize> = (0..n).map(|_| rng.below(n)).collect();
        let ba = sum_stats(idx.iter().map(|&i| &sa[i])).score();
        let bb = sum_stats(idx.iter().map(|&i| &sb[i])).score();
        if ba <= bb {
            not_better += 1;
        }
    }
    Ok(not_better as f64 / resamples as f64)
}

/// One point of a plot series; `value` is `None` where the quantity does not
/// exist (e.g. gate importance of a layer without a gate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub key: String,
    pub value: Option<f64>,
}

impl SeriesPoint {
    pub fn new(key: impl ToString, value: Option<f64>) -> Self {
        SeriesPoint {
            key: key.to_string(),
            value,
        }
    }
}

/// Named scalars plus named series, with deterministic ordering.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: BTreeMap<String, f64>,
    pub series: BTreeMap<String, Vec<SeriesPoint>>,
}

impl MetricsReport {
    pub fn is_empty(&self) -> bool {
        self.metrics.is_empty() && self.series.is_empty()
    }

    pub fn merge(&mut self, other: MetricsReport) {
        self.metrics.extend(other.metrics);
        self.series.extend(other.series);
    }
}
