//! `eval`, `analyze-le`, `analyze-gates` and `analyze-ngrams`. Each returns a
//! [`MetricsReport`] that the CLI writes as JSON.

use std::fs;
use std::path::Path;

use crate::analysis::{
    corpus_bleu, corpus_le, corpus_ngram_precision, dump_locality_entropy, gate_importance, locality_entropy,
    paired_bootstrap, precision_deltas, HeadReduction, MetricsReport, SentenceAttn, SeriesPoint,
};
use crate::commands::translate::{read_dumps, read_sources};
use crate::data::dataset::read_lines;
use crate::error::{Error, Result};

/// Phrase lengths examined by the n-gram analysis.
pub const NGRAM_RANGE: std::ops::RangeInclusive<usize> = 1..=9;

/// References from a `.jsonl` corpus (target side) or a plain text file.
pub fn read_references(path: &Path) -> Result<Vec<Vec<String>>> {
    match read_sources(path)? {
        (_, Some(refs)) => Ok(refs),
        (lines, None) => Ok(lines),
    }
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<Vec<String>>> {
    read_lines(path)
}

fn same_len(a: &[Vec<String>], b: &[Vec<String>], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Data(format!("{what}: {} vs {} sentences", a.len(), b.len())));
    }
    Ok(())
}

/// Corpus BLEU and its n-gram precisions; with `other`, also a paired
/// bootstrap p-value for "hyps beat other".
pub fn eval(hyps: &Path, refs: &Path, other: Option<&Path>, resamples: usize, seed: u64) -> Result<MetricsReport> {
    let h = read_hypotheses(hyps)?;
    let r = read_references(refs)?;
    same_len(&h, &r, "hypotheses vs references")?;
    let mut rep = MetricsReport::default();
    rep.metrics.insert("bleu".into(), corpus_bleu(&h, &r)?);
    rep.metrics.insert("sentences".into(), h.len() as f64);
    let precisions = (1..=4)
        .map(|n| Ok(SeriesPoint::new(n, Some(corpus_ngram_precision(&h, &r, n)?))))
        .collect::<Result<_>>()?;
    rep.series.insert("bleu_precision".into(), precisions);
    if let Some(o) = other {
        let b = read_hypotheses(o)?;
        same_len(&b, &r, "second system vs references")?;
        rep.metrics.insert("bleu_other".into(), corpus_bleu(&b, &r)?);
        rep.metrics
            .insert("bootstrap_p".into(), paired_bootstrap(&h, &b, &r, resamples, seed)?);
    }
    Ok(rep)
}

/// Corpus locality entropy plus a per-layer breakdown.
pub fn analyze_le(dumps: &Path, mode: HeadReduction) -> Result<MetricsReport> {
    let ds = read_dumps(dumps)?;
    let les = ds
        .iter()
        .map(|d| dump_locality_entropy(d, mode))
        .collect::<Result<Vec<_>>>()?;
    let mut rep = MetricsReport::default();
    rep.metrics.insert("corpus_le".into(), corpus_le(&les)?);
    rep.metrics.insert("sentences".into(), les.len() as f64);
    let layers = ds[0].layers.len();
    let mut series = Vec::with_capacity(layers);
    for l in 0..layers {
        let per_sentence = ds
            .iter()
            .map(|d| {
                let layer = d.layers.get(l).ok_or_else(|| Error::Data("dumps disagree on layer count".into()))?;
                let sent = SentenceAttn {
                    layers: vec![layer.attn.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect()],
                };
                locality_entropy(&sent)
            })
            .collect::<Result<Vec<_>>>()?;
        series.push(SeriesPoint::new(l + 1, Some(corpus_le(&per_sentence)?)));
    }
    rep.series.insert("le_by_layer".into(), series);
    Ok(rep)
}

/// Mean local-branch weight per decoder layer.
pub fn analyze_gates(dumps: &Path) -> Result<MetricsReport> {
    let ds = read_dumps(dumps)?;
    let imp = gate_importance(&ds)?;
    let mut rep = MetricsReport::default();
    let gated: Vec<f64> = imp.iter().filter_map(|i| i.importance).collect();
    if !gated.is_empty() {
        rep.metrics
            .insert("gate_importance_mean".into(), gated.iter().sum::<f64>() / gated.len() as f64);
    }
    rep.series.insert(
        "gate_importance".into(),
        imp.iter().map(|i| SeriesPoint::new(i.layer, i.importance)).collect(),
    );
    Ok(rep)
}

/// Corpus n-gram precision of system `a` minus system `b` for n = 1..9.
pub fn analyze_ngrams(a: &Path, b: &Path, refs: &Path) -> Result<MetricsReport> {
    let ha = read_hypotheses(a)?;
    let hb = read_hypotheses(b)?;
    let r = read_references(refs)?;
    same_len(&ha, &r, "system a vs references")?;
    same_len(&hb, &r, "system b vs references")?;
    let deltas = precision_deltas(&ha, &hb, &r, NGRAM_RANGE)?;
    let mut rep = MetricsReport::default();
    let series = |f: &dyn Fn(&crate::analysis::PrecisionDelta) -> f64| {
        deltas.iter().map(|d| SeriesPoint::new(d.n, Some(f(d)))).collect::<Vec<_>>()
    };
    rep.series.insert("precision_delta".into(), series(&|d| d.delta));
    rep.series.insert("precision_a".into(), series(&|d| d.a));
    rep.series.insert("precision_b".into(), series(&|d| d.b));
    Ok(rep)
}

pub fn write_report(path: &Path, rep: &MetricsReport) -> Result<()> {
    let mut s = serde_json::to_string_pretty(rep)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}
