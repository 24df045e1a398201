//! Training loop with periodic validation and top-3 checkpoint retention.

use std::fs;
use std::path::{Path, PathBuf};

use crate::commands::evaluate::token_accuracy;
use crate::data::{Checkpoint, Example, RunConfig, Vocab};
use crate::error::{Error, Result};
use crate::model::{Model, TokenBatch, TokenId};
use crate::numerics::{adam_step, AdamHyper, AdamState, Graph, RngState};

pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_FILE: &str = "best.ckpt";
pub const AVG_FILE: &str = "avg.ckpt";
const KEEP: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Mean training loss since the previous row (step 0: loss of the first
    /// batch before any update).
    pub loss: f64,
    pub val: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    /// Retained checkpoints, best first: `(step, val, path)`.
    pub kept: Vec<(usize, f64, PathBuf)>,
    /// `avg.ckpt` when averaging was requested, else `best.ckpt`.
    pub final_checkpoint: PathBuf,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,loss,val\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6}\n", r.step, r.loss, r.val));
    }
    s
}

fn ckpt_name(step: usize) -> String {
    format!("step_{step:07}.ckpt")
}

fn make_batch(data: &[Example], idx: &[usize]) -> Result<TokenBatch> {
    let src: Vec<Vec<TokenId>> = idx.iter().map(|&i| data[i].src.clone()).collect();
    let tgt: Vec<Vec<TokenId>> = idx.iter().map(|&i| data[i].tgt.clone()).collect();
    TokenBatch::new(&src, &tgt)
}

/// Trains a fresh model. Every output lands in `cfg.out_dir`.
pub fn train(cfg: &RunConfig, vocab: &Vocab, train: &[Example], valid: &[Example]) -> Result<TrainOutcome> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    model_cfg.seed = cfg.seed;
    let cfg = RunConfig {
        model: model_cfg,
        ..cfg.clone()
    };
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if valid.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json())?;

    let mut model = Model::<f32>::new(cfg.model.clone())?;
    let mut adam = AdamState::new(&model.params);
    let o = &cfg.optim;
    let hyper = AdamHyper {
        lr: o.lr,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
    };
    let root = RngState::new(cfg.seed);
    let mut order_rng = root.fork(1);
    let mut loss_rng = root.fork(2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    let mut log = Vec::new();
    let mut kept: Vec<(usize, f64, PathBuf)> = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;

    for step in 1..=o.steps {
        if cursor + o.batch_size > order.len() {
            order_rng.shuffle(&mut order);
            cursor = 0;
        }
        let take = o.batch_size.min(order.len());
        let batch = make_batch(train, &order[cursor..cursor + take])?;
        cursor += take;

        let mut g = Graph::new();
        let parts = model.loss(&mut g, &batch, &mut loss_rng)?;
        let loss = g.value(parts.total).data()[0] as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        if step == 1 {
            log.push(LogRow {
                step: 0,
                loss,
                val: token_accuracy(&model, valid)?,
            });
        }
        loss_sum += loss;
        loss_n += 1;
        g.backward(parts.total)?.accumulate_into(&mut model.params)?;
        if o.clip > 0.0 {
            let norm = model.params.grad_norm() as f64;
            if norm > o.clip {
                model.params.scale_grads((o.clip / norm) as f32);
            }
        }
        adam_step(&mut model.params, &mut adam, &hyper, o.lr_at(step), step as u64)?;

        if step % o.eval_every == 0 || step == o.steps {
            let val = token_accuracy(&model, valid)?;
            log.push(LogRow {
                step,
                loss: loss_sum / loss_n as f64,
                val,
            });
            loss_sum = 0.0;
            loss_n = 0;
            fs::write(out.join(LOG_FILE), log_csv(&log))?;
            retain(&mut kept, out, &model, vocab, step, val)?;
        }
    }

    let best = Checkpoint::load(&kept[0].2)?;
    best.save(&out.join(BEST_FILE))?;
    let final_checkpoint = if cfg.average_top3 {
        let ckpts = kept.iter().map(|k| Checkpoint::load(&k.2)).collect::<Result<Vec<_>>>()?;
        let avg = Checkpoint::average(&ckpts)?;
        let path = out.join(AVG_FILE);
        avg.save(&path)?;
        path
    } else {
        out.join(BEST_FILE)
    };
    Ok(TrainOutcome {
        log,
        kept,
        final_checkpoint,
    })
}

/// Saves the checkpoint if it ranks among the best `KEEP` (ties favour the
/// earlier step) and deletes the one it displaces.
fn retain(
    kept: &mut Vec<(usize, f64, PathBuf)>,
    out: &Path,
    model: &Model<f32>,
    vocab: &Vocab,
    step: usize,
    val: f64,
) -> Result<()> {
    let pos = kept.iter().position(|k| val > k.1).unwrap_or(kept.len());
    if pos >= KEEP {
        return Ok(());
    }
    let path = out.join(ckpt_name(step));
    Checkpoint::from_model(model, vocab, step, val).save(&path)?;
    kept.insert(pos, (step, val, path));
    if kept.len() > KEEP {
        let (_, _, p) = kept.pop().expect("len > KEEP");
        fs::remove_file(p)?;
    }
    Ok(())
}
