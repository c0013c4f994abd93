use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Model, TrainConfig, Variant};
use crate::blocks::{load_checkpoint, save_checkpoint, update_running_stats, Ctx, Mode, ParamStore};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::metrics::{count_flops, default_thresholds, EvalReport, ThresholdSweep};
use crate::par::{map_indexed, Exec};
use crate::scene::{add_gaussian_noise, NoiseConfig, SceneSample, CLASS_NAMES};
use crate::tensor::{Tape, Tensor};

/// Running-statistics momentum of batch norm.
const BN_MOMENTUM: f64 = 0.1;

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub step: u64,
    pub seed: u64,
    pub params: ParamStore,
    /// Velocity per parameter key.
    pub momentum: BTreeMap<String, Tensor>,
    pub history: Vec<LossReport>,
}

impl RunState {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Result<Self> {
        let params = model.init_params(cfg.seed, cfg.variant.uses_pv())?;
        let momentum = params.params().iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec()))).collect();
        Ok(RunState { step: 0, seed: cfg.seed, params, momentum, history: Vec::new() })
    }

    pub fn to_records(&self) -> BTreeMap<String, Tensor> {
        let mut r = self.params.to_records();
        for (k, v) in &self.momentum {
            r.insert(format!("momentum/{k}"), v.clone());
        }
        r.insert("state/step".into(), Tensor::scalar(self.step as f64));
        r.insert("state/seed".into(), Tensor::new([2], vec![(self.seed >> 32) as f64, (self.seed & 0xffff_ffff) as f64]).expect("2 values"));
        let rows: Vec<f64> = self.history.iter().flat_map(|h| [h.bev, h.xfa, h.pv, h.pv2bev, h.total]).collect();
        r.insert("state/history".into(), Tensor::new([self.history.len(), 5], rows).expect("5 per row"));
        r
    }

    pub fn from_records(records: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut store = BTreeMap::new();
        let mut momentum = BTreeMap::new();
        let get = |k: &str| records.get(k).ok_or_else(|| Error::Checkpoint { key: k.into(), msg: "missing".into() });
        for (k, v) in records {
            if let Some(name) = k.strip_prefix("momentum/") {
                momentum.insert(name.to_string(), v.clone());
            } else if !k.starts_with("state/") {
                store.insert(k.clone(), v.clone());
            }
        }
        let params = ParamStore::from_records(&store)?;
        for (k, v) in params.params() {
            match momentum.get(k) {
                Some(m) if m.shape() == v.shape() => {}
                _ => return Err(Error::Checkpoint { key: format!("momentum/{k}"), msg: "missing or misshapen".into() }),
            }
        }
        let seed = get("state/seed")?.data();
        let hist = get("state/history")?;
        let history = hist
            .data()
            .chunks(5)
            .map(|r| LossReport { bev: r[0], xfa: r[1], pv: r[2], pv2bev: r[3], total: r[4] })
            .collect();
        Ok(RunState {
            step: get("state/step")?.item() as u64,
            seed: ((seed[0] as u64) << 32) | seed[1] as u64,
            params,
            momentum,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.to_records(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(&load_checkpoint(path)?)
    }

    /// Loss log rows so far, with header.
    pub fn loss_csv(&self) -> String {
        let mut s = format!("{}\n", LossReport::csv_header());
        for (i, r) in self.history.iter().enumerate() {
            let _ = writeln!(s, "{}", r.csv_row(i as u64 + 1));
        }
        s
    }
}

/// Scene visited at `step`: each pass over the `n` scenes is a fresh
/// permutation seeded by the run seed and the pass number.
pub fn scene_order(seed: u64, step: u64, n: usize) -> usize {
    let epoch = step / n as u64;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    order[(step % n as u64) as usize]
}

/// One SGD-with-momentum step on `sample`. A non-finite loss term aborts
/// before any parameter changes.
pub fn train_step(state: &mut RunState, model: &Model, cfg: &TrainConfig, sample: &SceneSample) -> Result<LossReport> {
    let w = cfg.effective_weights();
    let with_pv = cfg.variant.uses_pv();
    let mut ctx = Ctx::new(Tape::new(), &state.params, Mode::Train);
    let f = model.forward_scene(&mut ctx, sample, with_pv)?;
    let (loss, report) = model.losses(&mut ctx, &f, sample, &w)?;
    if !report.is_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            terms: format!("bev={} xfa={} pv={} pv2bev={} total={}", report.bev, report.xfa, report.pv, report.pv2bev, report.total),
        });
    }
    ctx.tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (k, v) in ctx.bound() {
        if let Some(g) = ctx.tape.grad(*v) {
            grads.insert(k.clone(), g.clone());
        }
    }
    if let Some((k, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite { step: state.step, terms: format!("gradient of {k}") });
    }
    let observed = ctx.observed().to_vec();
    drop(ctx);
    for (k, p) in state.params.params_mut().iter_mut() {
        let Some(g) = grads.get(k) else { continue };
        let v = state.momentum.get_mut(k).ok_or_else(|| Error::Checkpoint { key: format!("momentum/{k}"), msg: "missing".into() })?;
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = cfg.momentum * *vv + gv;
            *pv -= cfg.lr * *vv;
        }
    }
    update_running_stats(&mut state.params, &observed, BN_MOMENTUM)?;
    state.step += 1;
    state.history.push(report);
    Ok(report)
}

/// Trains from `state` until `cfg.steps`, calling `on_step` after every
/// step (with the state after the update).
pub fn train(
    state: &mut RunState,
    model: &Model,
    cfg: &TrainConfig,
    scenes: &[&SceneSample],
    mut on_step: impl FnMut(&RunState, &LossReport) -> Result<()>,
) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::Invalid("no training scenes".into()));
    }
    while state.step < cfg.steps {
        let s = scenes[scene_order(state.seed, state.step, scenes.len())];
        let r = train_step(state, model, cfg, s)?;
        on_step(state, &r)?;
    }
    Ok(())
}

/// Pooled per-class threshold-max IoU over `scenes`, optionally with
/// image noise of standard deviation `sigma` seeded per scene.
pub fn evaluate(params: &ParamStore, model: &Model, scenes: &[&SceneSample], sigma: f64, exec: Exec) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty dataset".into()));
    }
    let s = model.cfg.classes;
    if s > CLASS_NAMES.len() {
        return Err(Error::Invalid(format!("{s} classes but scenes carry {}", CLASS_NAMES.len())));
    }
    let per_scene = map_indexed(exec, scenes.len(), |i| -> Result<Vec<ThresholdSweep>> {
        let scene = scenes[i];
        let images = add_gaussian_noise(&scene.images, &NoiseConfig { sigma, seed: scene.seed ^ 0x6576_616c })?;
        let mut ctx = Ctx::new(Tape::no_grad(), params, Mode::Eval);
        let noisy = SceneSample { images, ..scene.clone() };
        let f = model.forward_scene(&mut ctx, &noisy, false)?;
        let probs = ctx.tape.sigmoid(f.bev_logits);
        let p = ctx.tape.value(probs).data();
        let gt = scene.bev_target(s);
        let plane = p.len() / s;
        (0..s)
            .map(|c| {
                let mut sw = ThresholdSweep::new(default_thresholds())?;
                sw.add(&p[c * plane..(c + 1) * plane], &gt.data()[c * plane..(c + 1) * plane])?;
                Ok(sw)
            })
            .collect()
    });
    let mut pooled: Option<Vec<ThresholdSweep>> = None;
    for sweeps in per_scene {
        let sweeps = sweeps?;
        pooled = Some(match pooled {
            None => sweeps,
            Some(mut acc) => {
                for (a, b) in acc.iter_mut().zip(&sweeps) {
                    a.merge(b)?;
                }
                acc
            }
        });
    }
    EvalReport::from_sweeps(&CLASS_NAMES[..s], &pooled.expect("non-empty"))
}

/// One trained and evaluated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub fusion: String,
    pub seed: u64,
    pub pv: bool,
    pub xfa: bool,
    pub pv2bev: bool,
    pub xff: bool,
    pub report: EvalReport,
    pub macs: u64,
    /// Validation reports at extra noise levels, if requested.
    pub noise: Vec<(f64, EvalReport)>,
}

/// Trains every configuration on `train_set` and evaluates on `val_set`
/// at each of `sigmas` (the first one is the reported clean result).
pub fn run_ablation(
    configs: &[TrainConfig],
    train_set: &[&SceneSample],
    val_set: &[&SceneSample],
    sigmas: &[f64],
    exec: Exec,
    mut on_done: impl FnMut(&AblationRow, &RunState) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    if configs.is_empty() {
        return Err(Error::Invalid("empty ablation matrix".into()));
    }
    let sigmas = if sigmas.is_empty() { &[0.0][..] } else { sigmas };
    let mut rows = Vec::new();
    for cfg in configs {
        let model = Model::from_train(cfg)?;
        let mut state = RunState::new(&model, cfg)?;
        train(&mut state, &model, cfg, train_set, |_, _| Ok(()))?;
        let mut reports = Vec::new();
        for &s in sigmas {
            reports.push((s, evaluate(&state.params, &model, val_set, s, exec)?));
        }
        let w = cfg.effective_weights();
        let row = AblationRow {
            variant: cfg.variant,
            fusion: cfg.fusion.kind.to_string(),
            seed: cfg.seed,
            pv: w.pv != 0.0,
            xfa: w.xfa != 0.0,
            pv2bev: w.pv2bev != 0.0,
            xff: cfg.fusion.kind != crate::fusion::FusionKind::Concat,
            report: reports[0].1.clone(),
            macs: count_flops(&cfg.model, &cfg.fusion)?.total,
            noise: reports,
        };
        on_done(&row, &state)?;
        rows.push(row);
    }
    Ok(rows)
}

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,fusion,seed,pv,xfa,pv2bev,xff");
    if let Some(r) = rows.first() {
        for c in &r.report.classes {
            let _ = write!(s, ",iou_{c}");
        }
    }
    s.push_str(",miou,macs\n");
    for r in rows {
        let _ = write!(s, "{},{},{},{},{},{},{}", r.variant, r.fusion, r.seed, mark(r.pv), mark(r.xfa), mark(r.pv2bev), mark(r.xff));
        for iou in &r.report.ious {
            let _ = write!(s, ",{iou}");
        }
        let _ = writeln!(s, ",{},{}", r.report.miou, r.macs);
    }
    s
}

/// Mean and population standard deviation of mIoU per variant and noise
/// level over seeds, in first-appearance order.
pub fn ablation_summary_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,fusion,sigma,seeds,miou_mean,miou_std\n");
    let mut keys: Vec<(Variant, String, usize)> = Vec::new();
    for r in rows {
        for k in 0..r.noise.len() {
            if !keys.iter().any(|(v, f, i)| *v == r.variant && *f == r.fusion && *i == k) {
                keys.push((r.variant, r.fusion.clone(), k));
            }
        }
    }
    for (v, f, k) in keys {
        let vals: Vec<(f64, f64)> = rows.iter().filter(|r| r.variant == v && r.fusion == f).filter_map(|r| r.noise.get(k)).map(|(s, e)| (*s, e.miou)).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().map(|x| x.1).sum::<f64>() / n;
        let std = (vals.iter().map(|x| (x.1 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let _ = writeln!(s, "{v},{f},{},{},{mean},{std}", vals[0].0, vals.len());
    }
    s
}
