//! Trial orchestration, CSV output and the summary table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admittance::AdmittanceGains;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::plant::PlantParams;
use crate::policy::train::CurvePoint;
use crate::policy::{evaluate, train, EpisodeSetup, EvalPolicy, EvalStats, PolicyNet, TrainConfig};
use crate::scene::{build_scene, SceneConfig, SceneGraph};
use crate::seed::derive;
use crate::supervisor::{draw_estimates, run_controller, ControlConfig, ControllerId, EpisodeRecord, EpisodeSpec, SupervisorConfig};

/// Seed-derivation domains, so the streams of different uses never collide.
const DOMAIN_SCENE: u64 = 0;
const DOMAIN_TARGET: u64 = 1;
const DOMAIN_ESTIMATE: u64 = 2;
const DOMAIN_EPISODE: u64 = 3;
const DOMAIN_EVAL: u64 = 4;
const DOMAIN_INIT: u64 = 5;

/// Whole-run configuration, read from TOML. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Policy checkpoint used by the hybrid controller.
    pub checkpoint: Option<PathBuf>,
    pub controllers: Vec<ControllerId>,
    pub targets: usize,
    pub trials_per_target: usize,
    /// Cap on the total trial count; 0 means no cap.
    pub max_trials: usize,
    pub parallel: bool,
    pub eval_episodes: usize,
    pub scene: SceneConfig,
    pub env: EnvConfig,
    pub gains: AdmittanceGains,
    pub plant: PlantParams,
    pub supervisor: SupervisorConfig,
    pub train: TrainConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        let setup = EpisodeSetup::training();
        HarnessConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            checkpoint: None,
            controllers: ControllerId::ALL.to_vec(),
            targets: 7,
            trials_per_target: 4,
            max_trials: 26,
            parallel: true,
            eval_episodes: 200,
            scene: setup.scene,
            env: setup.env,
            gains: AdmittanceGains::default(),
            plant: PlantParams::default(),
            supervisor: SupervisorConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl HarnessConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: HarnessConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets == 0 || self.trials_per_target == 0 {
            return Err(Error::Config("targets and trials_per_target must be at least 1".into()));
        }
        let mut seen = self.controllers.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.controllers.len() {
            return Err(Error::Config("controllers must not repeat".into()));
        }
        self.scene.validate()?;
        self.train.validate()?;
        self.control().validate()
    }

    pub fn control(&self) -> ControlConfig {
        ControlConfig {
            supervisor: self.supervisor.clone(),
            gains: self.gains.clone(),
            plant: self.plant.clone(),
            env: self.env.clone(),
        }
    }

    pub fn episode_setup(&self) -> EpisodeSetup {
        EpisodeSetup {
            scene: self.scene.clone(),
            env: self.env.clone(),
        }
    }

    pub fn trial_count(&self) -> usize {
        let all = self.targets * self.trials_per_target;
        if self.max_trials == 0 {
            all
        } else {
            all.min(self.max_trials)
        }
    }

    pub fn needs_policy(&self) -> bool {
        self.controllers.contains(&ControllerId::Hybrid)
    }
}

/// One CSV row. Absent metrics serialize as empty fields.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial_id: usize,
    pub controller: &'static str,
    pub target_id: usize,
    pub seed: u64,
    pub success: bool,
    pub pivot_offset_m: Option<f64>,
    pub remnant_len_m: Option<f64>,
    #[serde(rename = "max_force_N")]
    pub max_force_n: f64,
    pub steps: usize,
    pub terminal: &'static str,
}

pub const CSV_HEADER: &str =
    "trial_id,controller,target_id,seed,success,pivot_offset_m,remnant_len_m,max_force_N,steps,terminal";

impl TrialRow {
    pub fn from_record(trial_id: usize, r: &EpisodeRecord) -> Self {
        TrialRow {
            trial_id,
            controller: r.controller.as_str(),
            target_id: r.target_id,
            seed: r.seed,
            success: r.success,
            pivot_offset_m: r.pivot_offset,
            remnant_len_m: r.remnant_length,
            max_force_n: r.max_force,
            steps: r.steps,
            terminal: r.terminal.as_str(),
        }
    }
}

/// A trial's scene, chosen target and index.
struct TargetSlot {
    scene: SceneGraph,
    target: usize,
}

fn target_slot(cfg: &HarnessConfig, t: usize) -> Result<TargetSlot> {
    let scene = build_scene(&cfg.scene, derive(cfg.seed, &[DOMAIN_SCENE, t as u64]))?;
    let n = scene.targets.len() as u64;
    let target = (derive(cfg.seed, &[DOMAIN_TARGET, t as u64]) % n) as usize;
    Ok(TargetSlot { scene, target })
}

pub fn episode_seed(master: u64, target: usize, trial: usize, controller: ControllerId) -> u64 {
    derive(master, &[DOMAIN_EPISODE, target as u64, trial as u64, controller.index()])
}

fn run_job(
    cfg: &HarnessConfig,
    control: &ControlConfig,
    slot: &TargetSlot,
    k: usize,
    c: ControllerId,
    policy: Option<&PolicyNet<f32>>,
    record_trace: bool,
) -> Result<EpisodeRecord> {
    let (t, trial) = (k / cfg.trials_per_target, k % cfg.trials_per_target);
    let target = &slot.scene.targets[slot.target];
    let estimates = draw_estimates(
        &target.point,
        &control.supervisor,
        derive(cfg.seed, &[DOMAIN_ESTIMATE, t as u64, trial as u64]),
    );
    let spec = EpisodeSpec {
        scene: &slot.scene,
        target,
        target_id: t,
        seed: episode_seed(cfg.seed, t, trial, c),
        record_trace,
    };
    run_controller(c, &spec, &estimates, policy, control)
}

/// Re-run one (trial, controller) episode of the configured run with tracing
/// enabled. The record matches the corresponding `run_trials` row.
pub fn run_single(
    cfg: &HarnessConfig,
    policy: Option<&PolicyNet<f32>>,
    trial: usize,
    controller: ControllerId,
) -> Result<EpisodeRecord> {
    cfg.validate()?;
    if controller == ControllerId::Hybrid && policy.is_none() {
        return Err(Error::Config("hybrid controller needs a policy checkpoint".into()));
    }
    if trial >= cfg.trial_count() {
        return Err(Error::Config(format!("trial {trial} out of range ({} trials)", cfg.trial_count())));
    }
    let slot = target_slot(cfg, trial / cfg.trials_per_target)?;
    run_job(cfg, &cfg.control(), &slot, trial, controller, policy, true)
}

/// Run every (trial, controller) pair. Rows come back in trial-major order,
/// controllers in configuration order, whatever the execution order was.
pub fn run_trials(cfg: &HarnessConfig, policy: Option<&PolicyNet<f32>>) -> Result<Vec<EpisodeRecord>> {
    cfg.validate()?;
    if cfg.needs_policy() && policy.is_none() {
        return Err(Error::Config("hybrid controller enabled but no policy checkpoint given".into()));
    }
    let control = cfg.control();
    let n_trials = cfg.trial_count();
    let n_targets = n_trials.div_ceil(cfg.trials_per_target).min(cfg.targets);
    let slots: Vec<TargetSlot> = (0..n_targets).map(|t| target_slot(cfg, t)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, ControllerId)> = (0..n_trials)
        .flat_map(|k| cfg.controllers.iter().map(move |&c| (k, c)))
        .collect();
    let run = |&(k, c): &(usize, ControllerId)| -> Result<EpisodeRecord> {
        run_job(cfg, &control, &slots[k / cfg.trials_per_target], k, c, policy, false)
    };
    if cfg.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    }
}

/// Train a fresh policy on the configured episode distribution.
pub fn train_policy(cfg: &HarnessConfig, on_update: impl FnMut(&CurvePoint)) -> Result<(PolicyNet<f32>, Vec<CurvePoint>)> {
    let setup = cfg.episode_setup();
    setup.validate()?;
    let mut net = PolicyNet::<f32>::init(setup.net_spec(), derive(cfg.train.seed, &[DOMAIN_INIT]))?;
    let curve = train(|r| setup.sample_env(r), &mut net, &cfg.train, on_update)?;
    Ok((net, curve))
}

/// Seed for held-out evaluation episodes. Training draws its episodes from a
/// stream seeded directly by `train.seed`, so the two never share scenes in practice.
pub fn eval_seed(cfg: &HarnessConfig) -> u64 {
    derive(cfg.seed, &[DOMAIN_EVAL])
}

pub fn evaluate_policy(cfg: &HarnessConfig, policy: EvalPolicy<'_>) -> Result<EvalStats> {
    evaluate(&cfg.episode_setup(), policy, cfg.eval_episodes, eval_seed(cfg))
}

pub fn trial_rows(cfg: &HarnessConfig, records: &[EpisodeRecord]) -> Vec<TrialRow> {
    let per_trial = cfg.controllers.len().max(1);
    records
        .iter()
        .enumerate()
        .map(|(i, r)| TrialRow::from_record(i / per_trial, r))
        .collect()
}

pub fn trials_csv(rows: &[TrialRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Protocol(format!("csv encoding failed: {e}")))?;
    }
    let body = w.into_inner().map_err(|e| Error::Protocol(format!("csv encoding failed: {e}")))?;
    let mut out = String::with_capacity(body.len() + CSV_HEADER.len() + 1);
    out.push_str(CSV_HEADER);
    out.push('\n');
    out.push_str(std::str::from_utf8(&body).expect("csv output is UTF-8"));
    Ok(out)
}

/// Mean and population standard deviation over the present values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Stat { n: 0, mean: f64::NAN, std: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Stat { n: v.len(), mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub controller: String,
    pub trials: usize,
    pub successes: usize,
    /// Rounded percentage.
    pub accuracy_pct: u32,
    pub pivot_offset_m: Stat,
    pub remnant_len_m: Stat,
    pub max_force_n: Stat,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn get(&self, controller: ControllerId) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.controller == controller.as_str())
    }

    /// Markdown table in centimetres and newtons.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| controller | accuracy | pivot offset (cm) | remnant length (cm) | max force (N) |\n");
        s.push_str("|---|---|---|---|---|\n");
        let cm = |st: &Stat| {
            if st.n == 0 {
                "n/a".to_string()
            } else {
                format!("{:.1} ± {:.1}", st.mean * 100.0, st.std * 100.0)
            }
        };
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {}% ({}/{}) | {} | {} | {:.1} ± {:.1} |",
                r.controller,
                r.accuracy_pct,
                r.successes,
                r.trials,
                cm(&r.pivot_offset_m),
                cm(&r.remnant_len_m),
                r.max_force_n.mean,
                r.max_force_n.std
            );
        }
        s
    }
}

pub fn accuracy_pct(successes: usize, trials: usize) -> u32 {
    if trials == 0 {
        0
    } else {
        (100.0 * successes as f64 / trials as f64).round() as u32
    }
}

/// Aggregate rows per controller, in order of first appearance.
pub fn summarize(rows: &[TrialRow]) -> SummaryTable {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.controller) {
            order.push(r.controller);
        }
    }
    let rows = order
        .into_iter()
        .map(|c| {
            let mine: Vec<&TrialRow> = rows.iter().filter(|r| r.controller == c).collect();
            let successes = mine.iter().filter(|r| r.success).count();
            SummaryRow {
                controller: c.to_string(),
                trials: mine.len(),
                successes,
                accuracy_pct: accuracy_pct(successes, mine.len()),
                pivot_offset_m: Stat::of(mine.iter().filter_map(|r| r.pivot_offset_m)),
                remnant_len_m: Stat::of(mine.iter().filter_map(|r| r.remnant_len_m)),
                max_force_n: Stat::of(mine.iter().map(|r| r.max_force_n)),
            }
        })
        .collect();
    SummaryTable { rows }
}

/// Write `trials.csv` and `summary.md` under `dir`.
pub fn write_outputs(dir: &Path, rows: &[TrialRow]) -> Result<SummaryTable> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("trials.csv");
    fs::write(&csv_path, trials_csv(rows)?).map_err(|e| Error::io(&csv_path, e))?;
    let table = summarize(rows);
    let md = dir.join("summary.md");
    fs::write(&md, table.to_markdown()).map_err(|e| Error::io(&md, e))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(c: &'static str, success: bool, pivot: Option<f64>, force: f64) -> TrialRow {
        TrialRow {
            trial_id: 0,
            controller: c,
            target_id: 0,
            seed: 1,
            success,
            pivot_offset_m: pivot,
            remnant_len_m: Some(0.03),
            max_force_n: force,
            steps: 10,
            terminal: "done",
        }
    }

    #[test]
    fn accuracy_rounding() {
        assert_eq!(accuracy_pct(20, 26), 77);
        assert_eq!(accuracy_pct(0, 26), 0);
        assert_eq!(accuracy_pct(26, 26), 100);
    }

    #[test]
    fn summary_stats() {
        let rows = vec![
            row("a", true, Some(0.01), 1.0),
            row("a", false, None, 3.0),
            row("b", true, Some(0.02), 2.0),
        ];
        let t = summarize(&rows);
        assert_eq!(t.rows.len(), 2);
        let a = &t.rows[0];
        assert_eq!((a.trials, a.successes, a.accuracy_pct), (2, 1, 50));
        assert_eq!(a.pivot_offset_m.n, 1);
        assert_eq!(a.pivot_offset_m.std, 0.0);
        assert!((a.max_force_n.mean - 2.0).abs() < 1e-12);
        assert!((a.max_force_n.std - 1.0).abs() < 1e-12);
        assert_eq!(t.rows[1].max_force_n.std, 0.0);
    }

    #[test]
    fn empty_csv_is_header_only() {
        assert_eq!(trials_csv(&[]).unwrap(), format!("{CSV_HEADER}\n"));
        assert!(summarize(&[]).rows.is_empty());
    }

    #[test]
    fn absent_metrics_are_empty_fields() {
        let text = trials_csv(&[row("open_loop", false, None, 0.0)]).unwrap();
        let line = text.lines().nth(1).unwrap();
        assert_eq!(line, "0,open_loop,0,1,false,,0.03,0.0,10,done");
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = HarnessConfig::default();
        let back = HarnessConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let err = HarnessConfig::from_toml("sed = 3\n").unwrap_err();
        assert!(err.is_config());
        let err = HarnessConfig::from_toml("[gains]\nf_thresh = 0.1\n").unwrap_err();
        assert!(err.is_config());
        let cfg = HarnessConfig::from_toml("seed = 9\ntargets = 2\n").unwrap();
        assert_eq!((cfg.seed, cfg.targets), (9, 2));
    }

    #[test]
    fn trial_count_cap() {
        let cfg = HarnessConfig::default();
        assert_eq!(cfg.trial_count(), 26);
        let uncapped = HarnessConfig {
            max_trials: 0,
            ..Default::default()
        };
        assert_eq!(uncapped.trial_count(), 28);
    }

    #[test]
    fn baseline_trials_are_deterministic_and_order_independent() {
        let cfg = HarnessConfig {
            controllers: vec![ControllerId::ClosedLoop, ControllerId::OpenLoop, ControllerId::OpenLoopMiscalibrated],
            targets: 2,
            trials_per_target: 2,
            ..Default::default()
        };
        let par = run_trials(&cfg, None).unwrap();
        let ser = run_trials(&HarnessConfig { parallel: false, ..cfg.clone() }, None).unwrap();
        let a = trials_csv(&trial_rows(&cfg, &par)).unwrap();
        let b = trials_csv(&trial_rows(&cfg, &ser)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 1 + 4 * 3);

        let one = run_single(&cfg, None, 3, ControllerId::OpenLoop).unwrap();
        assert_eq!(one.max_force, par[3 * 3 + 1].max_force);
        assert_eq!(one.steps, par[3 * 3 + 1].steps);
        assert_eq!(one.trace.len(), one.steps);
        assert!(run_single(&cfg, None, 4, ControllerId::OpenLoop).unwrap_err().is_config());
    }

    #[test]
    fn hybrid_without_policy_is_config_error() {
        let cfg = HarnessConfig::default();
        assert!(run_trials(&cfg, None).unwrap_err().is_config());
    }
}
