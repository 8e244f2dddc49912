// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde_json::{json, Value};

use super::config::{ExperimentConfig, ModelSource};
use super::{num, opt, Outcome, Table};
use crate::autodiff::Linearization;
use crate::error::{Error, Result};
use crate::field::{ResidualField, Site};
use crate::inference::{
    probe_atoms, sensitivity_atoms, solve_residual_target, solve_scalar_target, validate_solution, AdmissibleSet,
    Atom, ResidualSolverConfig, TargetField, ValidationTarget,
};
use crate::intervention::{composition_test, relative_response_map, CleanRun, CompositionMode, PatchSource};
use crate::metrics::displacement::layer_sweep;
use crate::metrics::green::green_slice_with;
use crate::metrics::{
    linearity_sweep, predict_dy, prediction_errors, site_scores, slice_concentration, superposition_sweep,
    GreenMethod, PromptPair,
};
use crate::model::task::KvTask;
use crate::model::train::{accuracy, train_on_task, TrainReport};
use crate::model::{checkpoint, Model, Observable};
use crate::numeric::{median, norm, RngStream};
use crate::transfer::{all_sites, estimate_intertwiner, refine_depth, response_fingerprints, ProbeSet};

pub(crate) struct Context<'c> {
    pub cfg: &'c ExperimentConfig,
    pub model: Model,
    pub task: Option<KvTask>,
    pub train: Option<TrainReport>,
    pub train_accuracy: Option<f64>,
    root: RngStream,
    /// Seed of every named stream handed out, for the metadata.
    pub seeds: BTreeMap<String, u64>,
    pub notes: Vec<String>,
}

impl<'c> Context<'c> {
    pub fn build(cfg: &'c ExperimentConfig) -> Result<Self> {
        let model = match &cfg.model {
            ModelSource::Init(c) => Model::init(c.clone())?,
            ModelSource::Checkpoint(p) => checkpoint::load(p)?,
        };
        let mut ctx = Self {
            cfg,
            model,
            task: None,
            train: None,
            train_accuracy: None,
            root: RngStream::new(cfg.seed),
            seeds: BTreeMap::new(),
            notes: Vec::new(),
        };
        if let Some(spec) = &cfg.task {
            let task = KvTask::with_facts(spec.seed, spec.n_keys, spec.n_vals, spec.n_facts)?;
            let mc = &ctx.model.config;
            if task.vocab_needed() > mc.vocab_size || task.prompt_len() > mc.n_ctx {
                return Err(Error::Config(format!(
                    "task needs {} tokens and length {}, model has {} and {}",
                    task.vocab_needed(),
                    task.prompt_len(),
                    mc.vocab_size,
                    mc.n_ctx
                )));
            }
            if matches!(cfg.model, ModelSource::Init(_)) {
                let (trained, report) = train_on_task(&ctx.model, &task, &spec.train)?;
                ctx.model = trained;
                ctx.train = Some(report);
            }
            let acc_seed = ctx.rng("accuracy").seed();
            ctx.train_accuracy = Some(accuracy(&ctx.model, &task, 256, acc_seed)?);
            ctx.task = Some(task);
        }
        Ok(ctx)
    }

    /// A named child of the master stream; the same name always yields the same stream.
    pub fn rng(&mut self, name: &str) -> RngStream {
        let r = self.root.child_named(name);
        self.seeds.insert(name.into(), r.seed());
        r
    }

    pub fn model_info(&self) -> Value {
        let c = &self.model.config;
        json!({
            "source": match &self.cfg.model {
                ModelSource::Init(_) => "init".to_string(),
                ModelSource::Checkpoint(p) => p.display().to_string(),
            },
            "config": c,
            "trained_steps": self.train.as_ref().map(|r| r.steps),
            "final_loss": self.train.as_ref().and_then(|r| r.losses.last().copied()),
            "task_accuracy": self.train_accuracy,
        })
    }

    /// A prompt and its observable.
    fn prompt(&self, rng: &mut RngStream) -> Result<(Vec<usize>, Observable)> {
        let p = &self.cfg.prompt;
        let v = self.model.config.vocab_size;
        let (tokens, task_obs) = match (&p.tokens, &self.task) {
            (Some(t), _) => (t.clone(), None),
            (None, Some(task)) => match p.period {
                // A block of period / 3 facts repeated up to the context length.
                Some(period) => {
                    let mut keys: Vec<usize> = (0..task.n_keys).collect();
                    rng.shuffle(&mut keys);
                    keys.truncate(period / 3);
                    let block: Vec<usize> = keys
                        .iter()
                        .flat_map(|&k| [task.key_token(k), task.answer(k), task.sep_token()])
                        .collect();
                    let mut t = Vec::new();
                    while t.len() + block.len() + 3 <= self.model.config.n_ctx {
                        t.extend(&block);
                    }
                    t.extend([task.query_token(), task.key_token(keys[0]), task.is_token()]);
                    (t, Some(task.observable(keys[0])))
                }
                None => {
                    let (t, key) = task.sample(rng);
                    (t, Some(task.observable(key)))
                }
            },
            (None, None) => {
                let block = p.period.unwrap_or(p.length).min(p.length).max(1);
                let unit: Vec<usize> = (0..block).map(|_| rng.below(v)).collect();
                ((0..p.length).map(|i| unit[i % block]).collect(), None)
            }
        };
        self.model.check_tokens(&tokens)?;
        let obs = match (p.observable, task_obs) {
            (Some(o), _) => o,
            (None, Some(o)) => o,
            (None, None) => {
                let t = rng.below(v);
                Observable::new(t, (t + 1 + rng.below(v - 1)) % v)
            }
        };
        obs.validate(v, tokens.len())?;
        Ok((tokens, obs))
    }

    /// Configured sites, or `n_sites` sampled among those the readout can see.
    fn sites(&self, n_tokens: usize, obs: &Observable, rng: &mut RngStream) -> Result<Vec<Site>> {
        if let Some(s) = &self.cfg.grids.sites {
            for &site in s {
                self.model.check_site(site, n_tokens)?;
            }
            return Ok(s.clone());
        }
        let pos = obs.readout_position(n_tokens);
        let top = self.model.n_layers();
        let mut live: Vec<Site> = all_sites(top, n_tokens)
            .into_iter()
            .filter(|s| s.token <= pos && (s.layer < top || s.token == pos))
            .collect();
        rng.shuffle(&mut live);
        live.truncate(self.cfg.grids.n_sites);
        live.sort();
        Ok(live)
    }

    fn amplitude(&self, residuals: &ResidualField, site: Site, value: f64) -> f64 {
        if self.cfg.grids.relative_amplitudes {
            value * norm(residuals.site(site))
        } else {
            value
        }
    }
}

pub(crate) fn run(ctx: &mut Context) -> Result<Outcome> {
    match ctx.cfg.experiment.as_str() {
        "linearity" => linearity(ctx),
        "predict" => predict(ctx),
        "field" => field(ctx),
        "compose" => compose(ctx),
        "sites" => sites(ctx),
        "green" => green(ctx),
        "displace" => displace(ctx),
        "infer" => infer(ctx),
        "transfer" => transfer(ctx),
        other => Err(Error::UnknownExperiment(other.into())),
    }
}

fn max_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, f64::max)
}

fn linearity(ctx: &mut Context) -> Result<Outcome> {
    let mut rng = ctx.rng("linearity");
    let (tokens, obs) = ctx.prompt(&mut rng)?;
    let sites = ctx.sites(tokens.len(), &obs, &mut rng)?;
    let m = &ctx.model;
    let g = &ctx.cfg.grids;
    let tau = ctx.cfg.thresholds.tau;
    let clean = CleanRun::new(m, &tokens)?;
    let mut table = Table::new(
        "linearity",
        &["epsilon", "dy_meas", "dy_pred_slope", "eta_nl", "eta_sup", "in_band", "site_layer", "site_token", "fraction"],
    );
    let (mut site_nl, mut site_sup, mut degenerate) = (Vec::new(), Vec::new(), 0);
    for &site in &sites {
        let grid: Vec<f64> = g.amplitudes.iter().map(|&a| ctx.amplitude(clean.residuals(), site, a)).collect();
        let j1 = rng.unit_vector(m.width());
        let j2 = rng.unit_vector(m.width());
        let lin = linearity_sweep(m, &tokens, site, &j1, &grid, g.band, &obs)?;
        let sup = superposition_sweep(m, &tokens, site, &j1, &j2, &grid, g.band, &obs)?;
        let eta_sup = sup.eta_sup.unwrap_or_default();
        let pred = lin.dy_pred();
        for i in 0..grid.len() {
            let nl = lin.eta_nl[i];
            let in_band = nl.map_or(grid[i] == 0.0, |v| v < tau) && eta_sup[i] < tau;
            table.push(vec![
                num(grid[i]),
                num(lin.dy[i]),
                num(pred[i]),
                opt(nl),
                num(eta_sup[i]),
                in_band.to_string(),
                site.layer.to_string(),
                site.token.to_string(),
                num(g.amplitudes[i]),
            ]);
        }
        if lin.slope_degenerate {
            degenerate += 1;
        } else {
            site_nl.push(max_of(lin.eta_nl.iter().flatten().copied()));
            site_sup.push(max_of(eta_sup.iter().copied()));
        }
    }
    // Linear readout: the observable is exactly linear in the last residual.
    let top = Site::new(m.n_layers(), obs.readout_position(tokens.len()));
    let j = rng.unit_vector(m.width());
    let grid: Vec<f64> = g.amplitudes.iter().map(|&a| ctx.amplitude(clean.residuals(), top, a)).collect();
    let lin_readout = linearity_sweep(m, &tokens, top, &j, &grid, g.band, &obs.linear())?;
    let lin_max = max_of(lin_readout.eta_nl.iter().flatten().copied());

    let mut out = Outcome::default();
    let mnl = median(&site_nl);
    let msup = median(&site_sup);
    out.metric("sites", sites.len());
    out.metric("degenerate_slopes", degenerate);
    out.metric("median_max_eta_nl", mnl);
    out.metric("median_max_eta_sup", msup);
    out.metric("linear_readout_max_eta_nl", lin_max);
    out.gate("eta_nl", mnl.is_some_and(|v| v < tau), format!("median max eta_nl {} vs tau {tau}", show(mnl)));
    out.gate("eta_sup", msup.is_some_and(|v| v < tau), format!("median max eta_sup {} vs tau {tau}", show(msup)));
    out.gate("linear_readout", lin_max <= 1e-9, format!("linear-readout max eta_nl {lin_max:e}"));
    out.tables.push(table);
    Ok(out)
}

fn predict(ctx: &mut Context) -> Result<Outcome> {
    let mut rng = ctx.rng("predict");
    let eps0 = ctx.cfg.thresholds.eps0;
    let mut table = Table::new(
        "predict",
        &["prompt", "site_layer", "site_token", "epsilon", "dy_meas", "dy_pred", "e_abs", "e_rel", "low_signal", "regime"],
    );
    let mut pairs = Vec::new();
    let mut keys = Vec::new();
    for p in 0..ctx.cfg.prompt.count {
        let (tokens, obs) = ctx.prompt(&mut rng)?;
        let sites = ctx.sites(tokens.len(), &obs, &mut rng)?;
        let m = &ctx.model;
        let clean = CleanRun::new(m, &tokens)?;
        let a = Linearization::new(m, &tokens)?.sensitivity(&obs)?;
        for site in sites {
            let eps = ctx.amplitude(clean.residuals(), site, ctx.cfg.grids.epsilon);
            let patch = PatchSource::new(site, rng.unit_vector(m.width()), eps);
            pairs.push((clean.measure_dy(&patch, &obs)?, predict_dy(&a, &patch)?));
            keys.push((p, site, eps));
        }
    }
    let s = prediction_errors(&pairs, eps0);
    for ((p, site, eps), r) in keys.iter().zip(&s.records) {
        table.push(vec![
            p.to_string(),
            site.layer.to_string(),
            site.token.to_string(),
            num(*eps),
            num(r.dy_meas),
            num(r.dy_pred),
            num(r.e_abs),
            num(r.e_rel),
            r.low_signal.to_string(),
            r.regime.as_str().into(),
        ]);
    }
    let mut out = Outcome::default();
    out.metric("samples", pairs.len());
    out.metric("median_e_abs", s.median_e_abs);
    out.metric("median_e_rel", s.median_e_rel);
    out.metric("q90_e_rel", s.q90_e_rel);
    out.metric("low_signal", s.low_signal);
    out.metric(
        "regimes",
        json!({"good": s.regime_counts[0], "mixed": s.regime_counts[1], "low-signal": s.regime_counts[2], "nonlinear": s.regime_counts[3]}),
    );
    out.gate(
        "median_e_rel",
        s.median_e_rel.is_some_and(|v| v < 0.05),
        format!("median E_rel {} vs 0.05", show(s.median_e_rel)),
    );
    out.tables.push(table);
    Ok(out)
}

/// Autocorrelation at every lag of `ln v` after removing its least-squares
/// line, which strips the distance decay of the response.
fn detrended_autocorrelation(v: &[f64]) -> Vec<f64> {
    let y: Vec<f64> = v.iter().map(|x| x.max(f64::MIN_POSITIVE).ln()).collect();
    let n = y.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = (0..y.len()).map(|i| (i as f64 - mx).powi(2)).sum();
    let slope = (0..y.len()).map(|i| (i as f64 - mx) * (y[i] - my)).sum::<f64>() / sxx.max(f64::MIN_POSITIVE);
    let r: Vec<f64> = (0..y.len()).map(|i| y[i] - my - slope * (i as f64 - mx)).collect();
    (0..r.len()).map(|lag| (0..r.len() - lag).map(|i| r[i] * r[i + lag]).sum()).collect()
}

fn field(ctx: &mut Context) -> Result<Outcome> {
    let mut rng = ctx.rng("field");
    let (tokens, _) = ctx.prompt(&mut rng)?;
    let m = &ctx.model;
    let sources: Vec<Site> = match &ctx.cfg.grids.sites {
        Some(s) => s.clone(),
        None => all_sites(m.n_layers() - 1, tokens.len()),
    };
    let direction = rng.unit_vector(m.width());
    let clean = CleanRun::new(m, &tokens)?;
    let norms: Vec<f64> = sources.iter().map(|&s| norm(clean.residuals().site(s))).collect();
    let amplitude = if ctx.cfg.grids.relative_amplitudes {
        ctx.cfg.grids.epsilon * median(&norms).unwrap_or(0.0)
    } else {
        ctx.cfg.grids.epsilon
    };
    let map = relative_response_map(m, &tokens, &sources, &direction, amplitude)?;
    let mut table = Table::new("field", &["d_layer", "d_token", "mean_response_norm", "count"]);
    for (l, x, mean, count) in map.rows() {
        table.push(vec![l.to_string(), x.to_string(), num(mean), count.to_string()]);
    }
    let marginal = map.token_marginal();
    let mut out = Outcome::default();
    out.notes.push("shared source direction: one unit vector from the `field` stream".into());
    out.metric("amplitude", amplitude);
    out.metric("source_sites", sources.len());
    out.metric("token_marginal", marginal.clone());
    // Offsets from 1 on; offset 0 holds the injected patch itself.
    if let Some(p) = ctx.cfg.prompt.period.filter(|&p| p >= 2 && p + 2 < marginal.len()) {
        let ac = detrended_autocorrelation(&marginal[1..]);
        let peak = ac[p] > ac[p - 1] && ac[p] > ac[p + 1];
        out.metric("period", p);
        out.metric("marginal_autocorrelation", ac);
        out.metric("period_peak", peak);
        out.gate("period_peak", peak, format!("autocorrelation peak at lag {p}: {peak}"));
    }
    out.tables.push(table);
    Ok(out)
}

fn compose(ctx: &mut Context) -> Result<Outcome> {
    let mut rng = ctx.rng("compose");
    let (tokens, obs) = ctx.prompt(&mut rng)?;
    let m = &ctx.model;
    let big_l = m.n_layers();
    let g = &ctx.cfg.grids;
    let mut pairs = Vec::new();
    let candidates: Vec<Site> = ctx.sites(tokens.len(), &obs, &mut rng)?.into_iter().filter(|s| s.layer + 1 < big_l).collect();
    for site in candidates {
        let mids: Vec<usize> = match &g.mid_layers {
            Some(v) => v.iter().copied().filter(|&k| site.layer < k && k < big_l).collect(),
            None => vec![site.layer + 1 + rng.below(big_l - 1 - site.layer)],
        };
        for mid in mids {
            pairs.push((site, mid, rng.unit_vector(m.width())));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Config("no source site lies below a middle layer".into()));
    }
    let mut table = Table::new("compose", &["site_layer", "site_token", "mid_layer", "mode", "epsilon", "eta_comp"]);
    let (mut worst_ratio, mut worst_measured, mut ratios) = (0.0f64, 0.0f64, Vec::new());
    for (site, mid, j) in &pairs {
        for mode in [CompositionMode::Linearized, CompositionMode::Measured] {
            let rep = composition_test(m, &tokens, *site, j, *mid, &g.compose_epsilons, mode)?;
            for (e, eta) in rep.epsilons.iter().zip(&rep.eta_comp) {
                table.push(vec![
                    site.layer.to_string(),
                    site.token.to_string(),
                    mid.to_string(),
                    match mode {
                        CompositionMode::Linearized => "linearized",
                        CompositionMode::Measured => "measured",
                    }
                    .into(),
                    num(*e),
                    num(*eta),
                ]);
            }
            match mode {
                CompositionMode::Linearized => {
                    for w in rep.eta_comp.windows(2) {
                        worst_ratio = worst_ratio.max(w[1] / w[0]);
                        ratios.push(w[1] / w[0]);
                    }
                }
                CompositionMode::Measured => worst_measured = worst_measured.max(max_of(rep.eta_comp.iter().copied())),
            }
        }
    }
    let mut out = Outcome::default();
    out.metric("pairs", pairs.len());
    out.metric("median_successive_ratio", median(&ratios));
    out.metric("worst_successive_ratio", worst_ratio);
    out.metric("measured_max_eta_comp", worst_measured);
    out.gate("first_order_decay", worst_ratio <= 0.6, format!("worst successive ratio {worst_ratio:.3}"));
    out.gate("measured_handoff", worst_measured < 1e-10, format!("measured-mode max {worst_measured:e}"));
    out.tables.push(table);
    Ok(out)
}

fn sites(ctx: &mut Context) -> Result<Outcome> {
    let mut rng = ctx.rng("sites");
    let mut table = Table::new("sites", &["prompt", "layer", "token", "score", "rank"]);
    let k = ctx.cfg.grids.top_k;
    let mut coverage = Vec::new();
    let mut for_90 = Vec::new();
    let mut layer_marginal: Vec<f64> = Vec::new();
    for p in 0..ctx.cfg.prompt.count {
        let (tokens, obs) = ctx.prompt(&mut rng)?;
        let a = Linearization::new(&ctx.model, &tokens)?.sensitivity(&obs)?;
        let scores = site_scores(&a);
        for (rank, (site, s)) in scores.ranked().into_iter().enumerate() {
            table.push(vec![p.to_string(), site.layer.to_string(), site.token.to_string(), num(s), (rank + 1).to_string()]);
        }
        coverage.push(scores.coverage(k));
        for_90.push(scores.sites_for_coverage(0.9) as f64);
        let lm = scores.layer_marginal();
        layer_marginal.resize(lm.len(), 0.0);
        layer_marginal.iter_mut().zip(&lm).for_each(|(a, b)| *a += b / ctx.cfg.prompt.count as f64);
    }
    let mut out = Outcome::default();
    out.notes.push("concentration runs on list-style prompts only; no prose prompt variant exists for the synthetic task".into());
    out.metric("top_k", k);
    out.metric("median_top_k_coverage", median(&coverage));
    out.metric("median_sites_for_90pct", median(&for_90));
    out.metric("mean_layer_marginal", layer_marginal);
    out.tables.push(table);
    Ok(out)
}

fn green(ctx: &mut Context) -> Result<Outcome> {
    let mut rng = ctx.rng("green");
    let (tokens, obs) = ctx.prompt(&mut rng)?;
    let m = &ctx.model;
    let big_l = m.n_layers();
    let n = tokens.len();
    let pairs: Vec<(Site, Site)> = match &ctx.cfg.grids.green_pairs {
        Some(p) => p.clone(),
        None => ctx
            .sites(n, &obs, &mut rng)?
            .into_iter()
            .filter(|s| s.layer < big_l)
            .flat_map(|s| {
                let mut v = vec![(s, Site::new(s.layer + 1, s.token))];
                if s.token + 1 < n {
                    v.push((s, Site::new(s.layer + 1, s.token + 1)));
                }
                v
            })
            .collect(),
    };
    for &(s, t) in &pairs {
        m.check_site(s, n)?;
        m.check_site(t, n)?;
    }
    let lin = Linearization::new(m, &tokens)?;
    let mut table = Table::new(
        "green",
        &[
            "source_layer", "source_token", "target_layer", "target_token", "causal", "frobenius", "mean_abs_diag",
            "mean_abs_offdiag", "entries_50", "entries_90", "entries_99", "jvp_vjp_max_diff",
        ],
    );
    let mut conc_table = Table::new("green_concentration", &["pair", "k", "cumulative"]);
    let (mut worst_diff, mut dominant, mut adjacent) = (0.0f64, 0, 0);
    for (i, &(s, t)) in pairs.iter().enumerate() {
        let a = green_slice_with(&lin, s, t, GreenMethod::Jvp)?;
        let b = green_slice_with(&lin, s, t, GreenMethod::Vjp)?;
        let diff = max_of(a.matrix.iter().zip(&b.matrix).map(|(x, y)| (x - y).abs()));
        worst_diff = worst_diff.max(diff);
        let (d, o) = a.diagonal_dominance();
        if t.layer == s.layer + 1 && t.token == s.token {
            adjacent += 1;
            dominant += usize::from(d > o);
        }
        let c = slice_concentration(&a);
        table.push(vec![
            s.layer.to_string(),
            s.token.to_string(),
            t.layer.to_string(),
            t.token.to_string(),
            a.causal.to_string(),
            num(a.frobenius()),
            num(d),
            num(o),
            c.entries_50.to_string(),
            c.entries_90.to_string(),
            c.entries_99.to_string(),
            num(diff),
        ]);
        for (k, v) in c.cumulative.iter().enumerate() {
            conc_table.push(vec![i.to_string(), (k + 1).to_string(), num(*v)]);
        }
    }
    let mut out = Outcome::default();
    out.metric("pairs", pairs.len());
    out.metric("jvp_vjp_max_diff", worst_diff);
    out.metric("adjacent_diagonal_dominant", dominant);
    out.metric("adjacent_pairs", adjacent);
    out.gate("jvp_vjp_agreement", worst_diff <= 1e-10, format!("max entry diff {worst_diff:e}"));
    out.gate("diagonal_dominance", dominant == adjacent, format!("{dominant}/{adjacent} adjacent slices"));
    out.tables.push(table);
    out.tables.push(conc_table);
    Ok(out)
}

fn make_pairs(ctx: &mut Context, rng: &mut RngStream) -> Result<Vec<PromptPair>> {
    let count = ctx.cfg.grids.pairs;
    if let Some(task) = &ctx.task {
        let keys = task.answer_pairs(count, rng);
        return keys
            .iter()
            .enumerate()
            .map(|(id, &(ka, kb))| {
                let (a, b) = task.prompt_pair(ka, kb, rng)?;
                Ok(PromptPair {
                    id,
                    tokens_a: a,
                    tokens_b: b,
                    key_a: task.key_token(ka),
                    key_b: task.key_token(kb),
                    answer_a: task.answer(ka),
                    answer_b: task.answer(kb),
                })
            })
            .collect();
    }
    // Without a task: prompts that differ in one "key" position and random answers.
    ctx.notes.push("displacement pairs are random prompts differing at one position; answers are random tokens".into());
    let v = ctx.model.config.vocab_size;
    let mut out = Vec::with_capacity(count);
    for id in 0..count {
        let (a, _) = ctx.prompt(rng)?;
        let pos = if a.len() >= 2 { a.len() - 2 } else { 0 };
        let mut b = a.clone();
        b[pos] = (a[pos] + 1 + rng.below(v - 1)) % v;
        let answer_a = rng.below(v);
        let answer_b = (answer_a + 1 + rng.below(v - 1)) % v;
        out.push(PromptPair {
            id,
            key_a: a[pos],
            key_b: b[pos],
            tokens_a: a,
            tokens_b: b,
            answer_a,
            answer_b,
        });
    }
    Ok(out)
}

fn displace(ctx: &mut Context) -> Result<Outcome> {
    let mut rng = ctx.rng("displace");
    let pairs = make_pairs(ctx, &mut rng)?;
    let m = &ctx.model;
    let eps = &ctx.cfg.grids.displace_epsilons;
    let big_l = m.n_layers();
    let mut table = Table::new(
        "displace",
        &[
            "pair", "layer", "token", "epsilon", "toward", "delta", "displacement_norm", "angle_answer", "angle_key",
            "angle_gradient", "rank_clean_a", "rank_patched_a", "rank_clean_b",
        ],
    );
    let last_eps = eps.len() - 1;
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); big_l + 1];
    for pair in &pairs {
        let last = pair.tokens_a.len() - 1;
        for rep in layer_sweep(m, pair, last, eps)? {
            for (k, e) in eps.iter().enumerate() {
                table.push(vec![
                    pair.id.to_string(),
                    rep.site.layer.to_string(),
                    rep.site.token.to_string(),
                    num(*e),
                    num(rep.toward[k]),
                    num(rep.delta),
                    num(rep.displacement_norm),
                    opt(rep.angles[0]),
                    opt(rep.angles[1]),
                    opt(rep.angles[2]),
                    rep.rank_clean_a.to_string(),
                    rep.rank_patched_a[k].to_string(),
                    rep.rank_clean_b.to_string(),
                ]);
            }
            per_layer[rep.site.layer].push(rep.toward[last_eps]);
        }
    }
    let medians: Vec<f64> = per_layer.iter().map(|v| median(v).unwrap_or(0.0)).collect();
    let depth = |l: usize| m.config.normalized_depth(l);
    let third = |early: bool| {
        let v: Vec<f64> = (0..=big_l)
            .filter(|&l| if early { depth(l) <= 1.0 / 3.0 } else { depth(l) >= 2.0 / 3.0 })
            .map(|l| medians[l])
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let (first, late) = (third(true), third(false));
    let mut out = Outcome::default();
    out.metric("pairs", pairs.len());
    out.metric("epsilon", eps[last_eps]);
    out.metric("median_toward_by_layer", medians);
    out.metric("first_third_mean", first);
    out.metric("last_third_mean", late);
    if let Some(a) = ctx.train_accuracy {
        out.metric("task_accuracy", a);
    }
    out.gate("late_rise", late > first, format!("last third {late:.3} vs first third {first:.3}"));
    out.tables.push(table);
    Ok(out)
}

fn infer(ctx: &mut Context) -> Result<Outcome> {
    let mut rng = ctx.rng("infer");
    let (tokens, obs) = ctx.prompt(&mut rng)?;
    let sites = ctx.sites(tokens.len(), &obs, &mut rng)?;
    let m = &ctx.model;
    let g = &ctx.cfg.grids;
    let tau = ctx.cfg.thresholds.tau;
    let clean = CleanRun::new(m, &tokens)?;
    let lin = Linearization::new(m, &tokens)?;
    let a = lin.sensitivity(&obs)?;
    let mut table = Table::new(
        "infer",
        &["problem", "site_layer", "site_token", "amplitude", "target", "achieved", "relative_error", "in_band"],
    );
    let mut out = Outcome::default();

    // Scalar target: the first-order effect of a relative-epsilon patch along
    // the gradient at the strongest admissible site.
    let set = AdmissibleSet::new(sites.clone()).with_sparsity(g.sparsity);
    let best = sites
        .iter()
        .copied()
        .max_by(|x, y| norm(a.site(*x)).total_cmp(&norm(a.site(*y))).then(y.cmp(x)))
        .ok_or_else(|| Error::Config("no admissible sites".into()))?;
    let target = ctx.amplitude(clean.residuals(), best, g.epsilon) * norm(a.site(best));
    let scalar = solve_scalar_target(&a, &set, target)?;
    let v = validate_solution(m, &tokens, &scalar, &ValidationTarget::Scalar { obs, target })?;
    for s in &scalar.sources {
        table.push(vec![
            "scalar".into(),
            s.site.layer.to_string(),
            s.site.token.to_string(),
            num(s.amplitude),
            num(target),
            num(v.achieved),
            num(v.relative_error),
            (v.relative_error < tau).to_string(),
        ]);
    }
    out.metric("scalar_target", target);
    out.metric("scalar_achieved", v.achieved);
    out.metric("scalar_relative_error", v.relative_error);
    out.metric("scalar_source_norm", scalar.source_norm());
    out.gate("scalar_within_5pct", v.relative_error <= 0.05, format!("relative error {:.3e}", v.relative_error));

    // Field target: plant a sparse combination of dictionary atoms and recover it.
    let mut atoms: Vec<Atom> = sensitivity_atoms(&a, &sites);
    for &s in &sites {
        atoms.push(Atom {
            site: s,
            direction: rng.unit_vector(m.width()),
        });
    }
    let top = m.n_layers();
    let slices: Vec<Site> = (0..tokens.len()).map(|x| Site::new(top, x)).collect();
    let columns = probe_atoms(m, &tokens, &atoms, &slices)?;
    let k = g.sparsity.min(atoms.len());
    let mut idx: Vec<usize> = (0..atoms.len()).collect();
    rng.shuffle(&mut idx);
    let planted: Vec<(usize, f64)> = idx[..k]
        .iter()
        .map(|&i| (i, ctx.amplitude(clean.residuals(), atoms[i].site, g.epsilon) * (0.5 + rng.next_f64())))
        .collect();
    let mut values = vec![0.0; columns[0].len()];
    for &(i, c) in &planted {
        values.iter_mut().zip(&columns[i]).for_each(|(v, col)| *v += c * col);
    }
    let target_field = TargetField { slices, values };
    let sol = solve_residual_target(
        &atoms,
        &columns,
        &target_field,
        ResidualSolverConfig {
            lambda_rel: g.lambda_rel,
            sparsity: Some(k),
        },
    )?;
    let fv = validate_solution(m, &tokens, &sol, &ValidationTarget::Field(target_field.clone()))?;
    let coef_err = max_of((0..atoms.len()).map(|i| {
        let want = planted.iter().find(|p| p.0 == i).map_or(0.0, |p| p.1);
        (sol.coefficients[i] - want).abs() / want.abs().max(1.0)
    }));
    for s in &sol.sources {
        table.push(vec![
            "field".into(),
            s.site.layer.to_string(),
            s.site.token.to_string(),
            num(s.amplitude),
            num(fv.target),
            num(fv.achieved),
            num(fv.relative_error),
            fv.in_band.to_string(),
        ]);
    }
    out.metric("field_atoms", atoms.len());
    out.metric("field_planted", k);
    out.metric("field_residual_norm", sol.residual_norm);
    out.metric("field_coefficient_error", coef_err);
    out.metric("field_relative_error", fv.relative_error);
    out.gate("field_in_band", fv.in_band, format!("relative error {:.3e}", fv.relative_error));
    out.tables.push(table);
    Ok(out)
}

fn transfer(ctx: &mut Context) -> Result<Outcome> {
    let mut rng = ctx.rng("transfer");
    let (tokens, _) = ctx.prompt(&mut rng)?;
    let m = &ctx.model;
    let g = &ctx.cfg.grids;
    let n = tokens.len();
    let probes = ProbeSet::spread(n, m.width(), &mut rng.child_named("probes"))?;
    let rank = g.fingerprint_rank;
    let sites = all_sites(m.n_layers(), n);
    let fps = response_fingerprints(m, &tokens, &sites, &probes, rank)?;
    let own = estimate_intertwiner(&fps, &fps, 1.5 / m.n_layers() as f64, g.lambda_rel)?;
    let refined = refine_depth(m, g.refine_factor)?;
    let fine_sites = all_sites(refined.n_layers(), n);
    let fine = response_fingerprints(&refined, &tokens, &fine_sites, &probes, rank)?;
    let cross = estimate_intertwiner(&fps, &fine, g.depth_window, g.lambda_rel)?;

    let mut table = Table::new(
        "transfer",
        &["pair", "source_layer", "source_token", "target_layer", "target_token", "weight", "expected_layer", "within_one"],
    );
    let mut stats = Vec::new();
    for (name, map, factor) in [("self", &own, 1usize), ("refined", &cross, g.refine_factor)] {
        let (mut hits, mut mapped) = (0usize, 0usize);
        for (src, t) in map.sources.iter().zip(&map.mapping) {
            let expected = factor * src.layer;
            let (tl, tt, w, within) = match t {
                Some((dst, w)) => {
                    mapped += 1;
                    let ok = if factor == 1 {
                        dst == src
                    } else {
                        (dst.layer as i64 - expected as i64).abs() <= 1
                    };
                    hits += usize::from(ok);
                    (dst.layer.to_string(), dst.token.to_string(), num(*w), ok.to_string())
                }
                None => (String::new(), String::new(), String::new(), String::new()),
            };
            table.push(vec![
                name.into(),
                src.layer.to_string(),
                src.token.to_string(),
                tl,
                tt,
                w,
                expected.to_string(),
                within,
            ]);
        }
        stats.push((hits, mapped, map.sources.len()));
    }
    let self_rate = stats[0].0 as f64 / stats[0].2 as f64;
    let refined_rate = stats[1].0 as f64 / stats[1].1.max(1) as f64;
    let mut out = Outcome::default();
    out.metric("probes", probes.len());
    out.metric("rank", rank);
    out.metric("self_match_rate", self_rate);
    out.metric("refined_within_one_rate", refined_rate);
    out.metric("refined_mapped", stats[1].1);
    out.metric("refined_empty_windows", cross.empty_windows.len());
    out.gate("self_match", self_rate >= 0.95, format!("{}/{} sites", stats[0].0, stats[0].2));
    out.gate("refined_within_one", refined_rate >= 0.8, format!("{}/{} mapped sites", stats[1].0, stats[1].1));
    out.extra_json.push((
        "transfer.json".into(),
        json!({"self": own, "refined": cross, "refine_factor": g.refine_factor}),
    ));
    out.tables.push(table);
    Ok(out)
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |v| format!("{v:.3e}"))
}
