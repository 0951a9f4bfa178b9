use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run_dir::{self, RunDir};
use super::{
    denoiser, eval_alignment, render_log, train_adapter, train_base, train_pose_network, weights_fingerprint,
    AlignmentReport, RunConfig, Splits, BASE_CKPT, POSENET_CKPT, POSENET_EVAL_CKPT,
};
use crate::error::{ensure, Error, Result};
use crate::numcore::checkpoint::write_atomic;
use crate::numcore::ParamStore;
use crate::perception::{PoseNet, POSENET_EVAL_PREFIX, POSENET_PREFIX};

/// A named set of config overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Variant {
    pub fn new(name: impl Into<String>, overrides: &[(&str, &str)]) -> Self {
        Self {
            name: name.into(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn apply(&self, cfg: &RunConfig) -> Result<RunConfig> {
        let mut c = cfg.clone();
        for (k, v) in &self.overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Preset {
    NoPgi,
    NoLp,
    /// Baseline, graph integrator only, and the full model.
    Components,
    GraphStages(Vec<usize>),
    AlphaSweep(Vec<f32>),
}

impl Preset {
    /// Preset by name. The sweeps take an optional value list, as in
    /// `graph_stages(0,4)` or `alpha_sweep(0,0.01)`.
    pub fn parse(name: &str) -> Result<Self> {
        let (head, args) = match name.split_once('(') {
            Some((h, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::contract(format!("unbalanced parentheses in preset {name}")))?;
                (h, Some(inner))
            }
            None => (name, None),
        };
        fn list<T: std::str::FromStr>(name: &str, args: Option<&str>, default: Vec<T>) -> Result<Vec<T>> {
            let Some(a) = args else { return Ok(default) };
            let v = a
                .split(',')
                .map(|x| x.trim().parse::<T>())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map_err(|_| Error::contract(format!("bad value list in preset {name}")))?;
            ensure!(!v.is_empty(), "empty value list in preset {name}");
            Ok(v)
        }
        let plain = |p: Preset| {
            ensure!(args.is_none(), "preset {head} takes no values");
            Ok(p)
        };
        match head {
            "no_pgi" => plain(Preset::NoPgi),
            "no_lp" => plain(Preset::NoLp),
            "components" => plain(Preset::Components),
            "graph_stages" => Ok(Preset::GraphStages(list(name, args, vec![0, 1, 2, 3, 4])?)),
            "alpha_sweep" => Ok(Preset::AlphaSweep(list(name, args, vec![0.0, 0.01, 0.05, 0.1])?)),
            _ => Err(Error::contract(format!(
                "unknown preset {name} (expected no_pgi, no_lp, components, graph_stages or alpha_sweep)"
            ))),
        }
    }

    /// Variants in report order; the first row is the reference for deltas.
    pub fn variants(&self) -> Vec<Variant> {
        match self {
            Preset::NoPgi => vec![
                Variant::new("no_pgi", &[("model.pgi_levels", "0")]),
                Variant::new("full", &[]),
            ],
            Preset::NoLp => vec![
                Variant::new("no_lp", &[("adapter.alpha", "0.0")]),
                Variant::new("full", &[]),
            ],
            Preset::Components => vec![
                Variant::new("baseline", &[("model.pgi_levels", "0"), ("adapter.alpha", "0.0")]),
                Variant::new("pgi_only", &[("adapter.alpha", "0.0")]),
                Variant::new("full", &[]),
            ],
            Preset::GraphStages(ns) => ns
                .iter()
                .map(|n| Variant {
                    name: format!("stages{n}"),
                    overrides: vec![("model.pgi_levels".into(), n.to_string())],
                })
                .collect(),
            Preset::AlphaSweep(alphas) => alphas
                .iter()
                .map(|a| Variant {
                    name: format!("alpha{a}"),
                    overrides: vec![("adapter.alpha".into(), format!("{a:?}"))],
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub name: String,
    /// `section.key` entries that differ from the lab config.
    pub changed: Vec<String>,
    pub seeds: Vec<u64>,
    pub errors: Vec<f64>,
    pub mean_keypoint_error: f64,
    pub pck_05: f64,
    pub pck_10: f64,
    /// Relative change of mean keypoint error against the first row.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub preset: String,
    pub rows: Vec<VariantRow>,
    /// Named trend checks and whether they hold.
    pub flags: Vec<(String, bool)>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn flag(&self, name: &str) -> Option<bool> {
        self.flags.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn render(&self) -> String {
        let mut s = format!("preset: {}\n\n", self.preset);
        s.push_str("| variant | changed | seeds | mean keypoint error | PCK@0.05 | PCK@0.1 | delta vs first |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {:.5} | {:.4} | {:.4} | {:+.2}% |\n",
                r.name,
                if r.changed.is_empty() { "-".to_string() } else { r.changed.join(", ") },
                r.seeds.len(),
                r.mean_keypoint_error,
                r.pck_05,
                r.pck_10,
                100.0 * r.delta
            ));
        }
        if !self.flags.is_empty() {
            s.push('\n');
            for (n, v) in &self.flags {
                s.push_str(&format!("{n}: {}\n", if *v { "yes" } else { "no" }));
            }
        }
        s
    }
}

/// Relative gap `(worse - better) / worse`.
fn gap(better: f64, worse: f64) -> f64 {
    (worse - better) / worse
}

/// Trend checks mirroring the directional claims each preset probes.
fn flags(preset: &Preset, rows: &[VariantRow]) -> Vec<(String, bool)> {
    let err = |n: &str| rows.iter().find(|r| r.name == n).map(|r| r.mean_keypoint_error);
    let mut out = Vec::new();
    match preset {
        Preset::NoPgi => {
            if let (Some(a), Some(b)) = (err("full"), err("no_pgi")) {
                out.push(("pgi_helps".into(), a < b));
            }
        }
        Preset::NoLp => {
            if let (Some(a), Some(b)) = (err("full"), err("no_lp")) {
                out.push(("lp_helps".into(), a < b));
            }
        }
        Preset::Components => {
            if let (Some(base), Some(pgi), Some(full)) = (err("baseline"), err("pgi_only"), err("full")) {
                out.push(("ordered".into(), full < pgi && pgi < base));
                out.push(("gaps_at_least_3pct".into(), gap(full, pgi) >= 0.03 && gap(pgi, base) >= 0.03));
            }
        }
        Preset::GraphStages(_) => {
            let e: Vec<f64> = rows.iter().map(|r| r.mean_keypoint_error).collect();
            out.push(("monotone_nonincreasing".into(), e.windows(2).all(|w| w[1] <= w[0])));
            if let (Some(a), Some(b)) = (err("stages4"), err("stages0")) {
                out.push(("four_beats_zero".into(), a < b));
            }
        }
        Preset::AlphaSweep(_) => {
            if let Some(best) = rows.iter().min_by(|a, b| a.mean_keypoint_error.total_cmp(&b.mean_keypoint_error)) {
                out.push(("alpha0.01_best".into(), best.name == "alpha0.01"));
            }
            if let (Some(a), Some(b)) = (
                rows.iter().find(|r| r.name == "alpha0.01"),
                rows.iter().find(|r| r.name == "alpha0.1"),
            ) {
                let wins = a.errors.iter().zip(&b.errors).filter(|(x, y)| x <= y).count();
                out.push(("alpha0.01_le_alpha0.1_majority".into(), 2 * wins > a.errors.len()));
            }
        }
    }
    out
}

/// Artifacts shared by every variant and seed.
pub struct Shared {
    pub dir: PathBuf,
    pub base: ParamStore,
    pub loss_net: ParamStore,
    pub eval_net: ParamStore,
    pub splits: Splits,
}

/// Ablation workspace. Shared phases are trained once per relevant config;
/// each resolved variant config is trained and evaluated once and its report
/// cached under `runs/<config hash>`.
pub struct Lab {
    pub root: PathBuf,
    pub cfg: RunConfig,
    shared: Option<Shared>,
    /// Print progress to stderr.
    pub verbose: bool,
}

/// Config fields that do not influence the shared phases, reset to defaults.
fn shared_key(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.run = Default::default();
    c.adapter = Default::default();
    c.model.k = Default::default();
    c.model.pgi_levels = Default::default();
    c.model.activation = Default::default();
    c.diffusion.ddim_steps = Default::default();
    c.diffusion.guidance = Default::default();
    c.data.test_samples = Default::default();
    c
}

impl Lab {
    pub fn new(root: &Path, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            root: root.to_path_buf(),
            cfg,
            shared: None,
            verbose: false,
        })
    }

    fn note(&self, msg: &str) {
        if self.verbose {
            eprintln!("[lab] {msg}");
        }
    }

    /// Base denoiser and both pose networks, trained on first use.
    pub fn shared(&mut self) -> Result<&Shared> {
        if self.shared.is_none() {
            let key = shared_key(&self.cfg);
            let dir = self.root.join("shared").join(&key.hash()[..16]);
            let splits = Splits::generate(&self.cfg)?;
            let have = |n: &str| dir.join(format!("{n}.grpt")).exists();
            if !(have(BASE_CKPT) && have(POSENET_CKPT) && have(POSENET_EVAL_CKPT)) {
                let run = RunDir::create(&dir, &key)?;
                if !have(BASE_CKPT) {
                    self.note("training base denoiser");
                    let (store, log) = train_base(&key, &splits.train)?;
                    run.write("base_loss.csv", render_log(&log).as_bytes())?;
                    run.save_checkpoint(BASE_CKPT, &store)?;
                }
                for (eval, name) in [(false, POSENET_CKPT), (true, POSENET_EVAL_CKPT)] {
                    if !have(name) {
                        self.note(&format!("training {name}"));
                        let (store, report) = train_pose_network(&key, &splits, eval)?;
                        run.write(&format!("{name}_curve.csv"), report.render_curve().as_bytes())?;
                        run.save_checkpoint(name, &store)?;
                    }
                }
            }
            self.shared = Some(Shared {
                base: run_dir::load_checkpoint(&dir, BASE_CKPT, "base")?,
                loss_net: run_dir::load_checkpoint(&dir, POSENET_CKPT, "posenet")?,
                eval_net: run_dir::load_checkpoint(&dir, POSENET_EVAL_CKPT, "posenet")?,
                splits,
                dir,
            });
        }
        Ok(self.shared.as_ref().expect("initialised"))
    }

    /// Trains and evaluates the adapter described by `cfg`, or returns the
    /// cached report.
    pub fn run(&mut self, cfg: &RunConfig) -> Result<AlignmentReport> {
        ensure!(
            shared_key(cfg) == shared_key(&self.cfg),
            "variant changes settings of the shared phases: {:?}",
            cfg.diff(&self.cfg)
        );
        let dir = self.root.join("runs").join(&cfg.hash()[..16]);
        let report_path = dir.join("report.json");
        if report_path.exists() {
            return Ok(serde_json::from_slice(&fs::read(&report_path)?)?);
        }
        self.note(&format!(
            "seed {} {:?}",
            cfg.run.seed,
            cfg.diff(&self.cfg).into_iter().filter(|k| k != "run.seed").collect::<Vec<_>>()
        ));
        let verbose = self.verbose;
        let shared = self.shared()?;
        let run = RunDir::create(&dir, cfg)?;
        let (adapter, log) = train_adapter(cfg, &shared.base, &shared.loss_net, &shared.splits.train)?;
        run.write("adapter_loss.csv", render_log(&log).as_bytes())?;
        run.save_checkpoint(super::ADAPTER_CKPT, &adapter)?;
        let mut store = shared.base.clone();
        store.merge(adapter)?;
        store.freeze_all();
        let eval_net = PoseNet::new(POSENET_EVAL_PREFIX, cfg.posenet_net())?;
        let (report, _) = eval_alignment(
            cfg,
            &denoiser(cfg, true)?,
            &store,
            &weights_fingerprint(&shared.loss_net, POSENET_PREFIX),
            &eval_net,
            &shared.eval_net,
            &shared.splits.test,
        )?;
        run.write("eval_rows.csv", report.render_rows().as_bytes())?;
        run.write("eval_summary.txt", report.render_summary().as_bytes())?;
        write_atomic(&report_path, serde_json::to_string(&report)?.as_bytes())?;
        if verbose {
            eprintln!("[lab]   mean keypoint error {:.5}", report.mean_keypoint_error);
        }
        Ok(report)
    }

    /// Runs every variant for every seed and tabulates the results.
    pub fn ablate(&mut self, preset: &Preset, seeds: &[u64]) -> Result<AblationReport> {
        ensure!(!seeds.is_empty(), "ablation needs at least one seed");
        let mut rows = Vec::new();
        for v in preset.variants() {
            let vcfg = v.apply(&self.cfg)?;
            let mut reports = Vec::new();
            for &seed in seeds {
                let mut c = vcfg.clone();
                c.run.seed = seed;
                reports.push(self.run(&c)?);
            }
            let n = reports.len() as f64;
            let mean = |f: fn(&AlignmentReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
            rows.push(VariantRow {
                name: v.name.clone(),
                changed: vcfg.diff(&self.cfg),
                seeds: seeds.to_vec(),
                errors: reports.iter().map(|r| r.mean_keypoint_error).collect(),
                mean_keypoint_error: mean(|r| r.mean_keypoint_error),
                pck_05: mean(|r| r.pck_05),
                pck_10: mean(|r| r.pck_10),
                delta: 0.0,
            });
        }
        let first = rows[0].mean_keypoint_error;
        for r in &mut rows {
            r.delta = (r.mean_keypoint_error - first) / first;
        }
        Ok(AblationReport {
            preset: format!("{preset:?}"),
            flags: flags(preset, &rows),
            rows,
        })
    }

    /// Reference scores: the evaluation network on the real target images, and
    /// the base model sampled without pose conditioning.
    pub fn references(&mut self) -> Result<(AlignmentReport, AlignmentReport)> {
        let cfg = self.cfg.clone();
        let shared = self.shared()?;
        let eval_net = PoseNet::new(POSENET_EVAL_PREFIX, cfg.posenet_net())?;
        let targets: Vec<_> = shared.splits.test.iter().map(|s| s.target_image.clone()).collect();
        let ceiling = super::score_images(&eval_net, &shared.eval_net, &targets, &shared.splits.test)?;
        let (uncond, _) = eval_alignment(
            &cfg,
            &denoiser(&cfg, false)?,
            &shared.base,
            &weights_fingerprint(&shared.loss_net, POSENET_PREFIX),
            &eval_net,
            &shared.eval_net,
            &shared.splits.test,
        )?;
        Ok((ceiling, uncond))
    }
}
