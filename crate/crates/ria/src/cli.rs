//! `ria train | eval | ablate | export`.
//!
//! Failures print one JSON object `{"error": kind, "message": text}` on
//! stderr. The only environment variable read is `RIA_THREADS`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ria_core::env::{EnvFamily, FamilyKind};
use ria_core::eval::EvalOptions;
use ria_core::trainer::{Method, TrainConfig};

use crate::checkpoint::Checkpoint;
use crate::run::{self, ClusterSet, RunConfig};
use crate::{Result, RunError};

#[derive(Debug, Parser)]
#[command(name = "ria", version, about = "Context-aware world models with relational intervention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model into a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint: returns, prediction error and context clustering.
    Eval(EvalArgs),
    /// Train and evaluate several methods over several seeds.
    Ablate(AblateArgs),
    /// Write the context projection and similarity table of a checkpoint.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// Full-size networks and schedule.
    Full,
    /// Reduced schedule that fits a single CPU core.
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EnvArg {
    Pendulum,
    Springmass,
}

impl From<EnvArg> for FamilyKind {
    fn from(e: EnvArg) -> Self {
        match e {
            EnvArg::Pendulum => FamilyKind::Pendulum,
            EnvArg::Springmass => FamilyKind::SpringMass,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum MethodArg {
    ContextFree,
    VanillaContext,
    RelationOnly,
    RiaFull,
    TrueLabel,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::ContextFree => Method::ContextFree,
            MethodArg::VanillaContext => Method::VanillaContext,
            MethodArg::RelationOnly => Method::RelationOnly,
            MethodArg::RiaFull => Method::RiaFull,
            MethodArg::TrueLabel => Method::TrueLabel,
        }
    }
}

/// Optional overrides applied on top of a profile.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub grad_steps: Option<usize>,
    /// Trajectories collected per epoch.
    #[arg(long)]
    pub trajectories: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Transition segment length.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub elites: Option<usize>,
    #[arg(long)]
    pub mediators: Option<usize>,
    #[arg(long)]
    pub eval_transitions: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, c: &mut TrainConfig) {
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut c.epochs, self.epochs);
        set(&mut c.grad_steps_per_epoch, self.grad_steps);
        set(&mut c.trajectories_per_epoch, self.trajectories);
        set(&mut c.network.segment_len, self.k);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.cem.horizon, self.horizon);
        set(&mut c.cem.candidates, self.candidates);
        set(&mut c.cem.iterations, self.iterations);
        set(&mut c.cem.elites, self.elites);
        set(&mut c.cde.mediator_batch, self.mediators);
        set(&mut c.eval_transitions, self.eval_transitions);
        if let Some(b) = self.beta {
            c.cde.beta = b;
        }
        if let Some(lr) = self.lr {
            c.adam.learning_rate = lr;
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub env: EnvArg,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Profile::Full)]
    pub profile: Profile,
    #[command(flatten)]
    pub overrides: Overrides,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        base_config(self.env.into(), self.method.into(), self.seed, self.profile, &self.overrides)
    }
}

fn base_config(family: FamilyKind, method: Method, seed: u64, profile: Profile, ov: &Overrides) -> TrainConfig {
    let mut c = match profile {
        Profile::Full => TrainConfig::new(family, method, seed),
        Profile::Desk => TrainConfig::desk(family, method, seed),
    };
    ov.apply(&mut c);
    c
}

/// Evaluation knobs shared by `eval`, `ablate` and `export`.
#[derive(Debug, Clone, Args)]
pub struct EvalKnobs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Held-out transitions per split for the prediction error.
    #[arg(long, default_value_t = 2000)]
    pub transitions: usize,
    #[arg(long, default_value_t = 16)]
    pub contexts_per_env: usize,
    #[arg(long, value_enum, default_value_t = ClusterSet::Test)]
    pub cluster_set: ClusterSet,
    /// Planner horizon for evaluation episodes; defaults to the training value.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
}

impl EvalKnobs {
    fn options(&self, train: &TrainConfig, family: &EnvFamily, episodes: usize) -> EvalOptions {
        let mut cem = train.cem.clone();
        if let Some(h) = self.horizon {
            cem.horizon = h;
        }
        if let Some(c) = self.candidates {
            cem.candidates = c;
        }
        EvalOptions {
            episodes,
            cem,
            cde: train.cde,
            transitions: self.transitions,
            cluster_params: self.cluster_set.params(family),
            contexts_per_env: self.contexts_per_env,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Must match the checkpoint's family when given.
    #[arg(long, value_enum)]
    pub env: Option<EnvArg>,
    /// Planner episodes per test environment; 0 skips returns.
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub knobs: EvalKnobs,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub env: EnvArg,
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_values_t = [MethodArg::VanillaContext, MethodArg::RelationOnly, MethodArg::RiaFull, MethodArg::TrueLabel]
    )]
    pub methods: Vec<MethodArg>,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    #[arg(long, value_enum, default_value_t = Profile::Full)]
    pub profile: Profile,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long, default_value_t = 2000)]
    pub test_transitions: usize,
    #[arg(long, default_value_t = 16)]
    pub contexts_per_env: usize,
    #[arg(long, value_enum, default_value_t = ClusterSet::Test)]
    pub cluster_set: ClusterSet,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub knobs: EvalKnobs,
}

fn load_checkpoint(path: &std::path::Path, env: Option<EnvArg>) -> Result<(Checkpoint, ria_core::model::WorldModel)> {
    let ck = Checkpoint::load(path)?;
    if let Some(e) = env {
        let kind: FamilyKind = e.into();
        if kind != ck.config.family {
            return Err(ria_core::Error::Load(format!(
                "checkpoint was trained on {}, not {}",
                ck.config.family.name(),
                kind.name()
            ))
            .into());
        }
    }
    let model = ck.to_model()?;
    Ok((ck, model))
}

fn threads() -> usize {
    std::env::var("RIA_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let cfg = RunConfig {
                train: a.config(),
                out_dir: a.out.clone(),
            };
            let s = run::train_to_dir(&cfg)?;
            log::info!("final checkpoint {}", s.final_checkpoint.display());
            Ok(())
        }
        Command::Eval(a) => {
            let (ck, model) = load_checkpoint(&a.checkpoint, a.env)?;
            let family = EnvFamily::by_kind(ck.config.family);
            let opts = a.knobs.options(&ck.config, &family, a.episodes);
            run::evaluate_to_dir(&model, &family, &opts, &a.out)?;
            Ok(())
        }
        Command::Ablate(a) => {
            if a.methods.is_empty() {
                return Err(RunError::Usage("--methods must not be empty".into()));
            }
            let family_kind: FamilyKind = a.env.into();
            let base = base_config(family_kind, Method::RiaFull, 0, a.profile, &a.overrides);
            let family = EnvFamily::by_kind(family_kind);
            let opts = EvalOptions {
                episodes: a.episodes,
                cem: base.cem.clone(),
                cde: base.cde,
                transitions: a.test_transitions,
                cluster_params: a.cluster_set.params(&family),
                contexts_per_env: a.contexts_per_env,
                seed: 0,
            };
            let methods: Vec<Method> = a.methods.iter().map(|&m| m.into()).collect();
            run::ablate(&base, &methods, &a.seeds, &opts, &a.out, threads())?;
            Ok(())
        }
        Command::Export(a) => {
            let (ck, model) = load_checkpoint(&a.checkpoint, None)?;
            let family = EnvFamily::by_kind(ck.config.family);
            let opts = a.knobs.options(&ck.config, &family, 0);
            run::export_to_dir(&model, &family, &opts, &a.out)
        }
    }
}

fn report(e: &RunError) {
    let record = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    eprintln!("{record}");
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 2 {
                report(&RunError::Usage(e.kind().to_string()));
            }
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            report(&e);
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_reach_the_config() {
        let cli = Cli::try_parse_from([
            "ria", "train", "--env", "pendulum", "--method", "ria_full", "--seed", "4", "--out", "x", "--epochs", "2",
            "--beta", "0.5", "--k", "7", "--batch-size", "8", "--horizon", "3", "--candidates", "11",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else { panic!("expected train") };
        let c = a.config();
        assert_eq!((c.seed, c.epochs, c.network.segment_len, c.batch_size), (4, 2, 7, 8));
        assert_eq!((c.cem.horizon, c.cem.candidates), (3, 11));
        assert_eq!(c.cde.beta, 0.5);
        assert_eq!(c.method, Method::RiaFull);
    }

    #[test]
    fn ablate_defaults_to_four_methods() {
        let cli = Cli::try_parse_from(["ria", "ablate", "--env", "pendulum", "--seeds", "1,2,3", "--out", "x"]).unwrap();
        let Command::Ablate(a) = cli.command else { panic!("expected ablate") };
        assert_eq!(a.seeds, [1, 2, 3]);
        assert_eq!(
            a.methods,
            [MethodArg::VanillaContext, MethodArg::RelationOnly, MethodArg::RiaFull, MethodArg::TrueLabel]
        );
    }

    #[test]
    fn unknown_flag_is_rejected() {
        assert!(Cli::try_parse_from(["ria", "train", "--bogus"]).is_err());
    }
}
