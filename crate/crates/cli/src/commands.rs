//! Subcommand definitions and their implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use cbx_core::attribution::{AttributionConfig, Method, SmoothGrad, DEFAULT_IG_STEPS};
use cbx_core::cbm::{evaluate, init_model, train, Regime, TrainConfig};
use cbx_core::evalkit::{distance_pointing_game, sign_pattern_summary, SignClass};
use cbx_core::io::{
    contribution_csv, format_g, history_csv, intervention_csv, load_dataset, load_model,
    pointing_csv, save_dataset, save_model, table_csv,
};
use cbx_core::synth::{generate_dataset, GeneratorConfig};

use crate::error::{at, usage, CliError, Result};
use crate::session::{Session, Target};

#[derive(Debug, Parser)]
#[command(
    name = "cbx",
    version,
    about = "Concept bottleneck models: train, attribute, evaluate, intervene"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic part/colour dataset.
    Gen(GenArgs),
    /// Train a concept bottleneck model on a dataset's train split.
    Train(TrainArgs),
    /// Write a saliency map for one sample.
    Attribute(AttributeArgs),
    /// Distance pointing game over a split.
    Pointing(PointingArgs),
    /// Concept contribution table for one sample.
    Contrib(ContribArgs),
    /// Override concepts and re-run the class network.
    Intervene(InterveneArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 2500)]
    pub samples: usize,
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    pub size: Option<Vec<usize>>,
    #[arg(long, default_value_t = 3)]
    pub parts: usize,
    #[arg(long, default_value_t = 3)]
    pub colors: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.03)]
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RegimeArg {
    Independent,
    Sequential,
    Joint,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub regime: RegimeArg,
    /// Feed `sigmoid(g(x))` to `f` rather than raw logits.
    #[arg(long, action = clap::ArgAction::Set)]
    pub sigmoid: bool,
    /// Concept-loss weight for the joint regime.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub class_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss and accuracy as CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

/// Model, dataset and split shared by the per-sample commands.
#[derive(Debug, Args)]
pub struct Source {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

impl Source {
    fn open(&self) -> Result<Session> {
        if self.split != "train" && self.split != "test" {
            return usage(format!(
                "--split must be train or test, got {:?}",
                self.split
            ));
        }
        let model = load_model(&self.model).map_err(at(&self.model))?;
        let dataset = load_dataset(&self.data).map_err(at(&self.data))?;
        Ok(Session::new(model, dataset, &self.split)?)
    }
}

#[derive(Debug, Args)]
pub struct MethodOptions {
    /// Integrated-gradients steps.
    #[arg(long, default_value_t = DEFAULT_IG_STEPS)]
    pub steps: usize,
    /// SmoothGrad noise tunnel: sample count and noise σ.
    #[arg(long, num_args = 2, value_names = ["N", "SIGMA"])]
    pub smoothgrad: Option<Vec<String>>,
    /// SmoothGrad noise seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl MethodOptions {
    fn config(&self, method: &str) -> Result<AttributionConfig> {
        let method = match method {
            "lrp" => Method::Lrp { rule_map: None },
            "grad" => Method::Gradient,
            "ig" => {
                if self.steps == 0 {
                    return usage("--steps must be at least 1");
                }
                Method::IntegratedGradients {
                    steps: self.steps,
                    baseline: None,
                }
            }
            other => return usage(format!("unknown method {other:?} (lrp, grad, ig)")),
        };
        let mut config = AttributionConfig::new(method);
        if let Some(sg) = &self.smoothgrad {
            let n_samples: usize = sg[0]
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Usage(format!("bad SmoothGrad count {:?}", sg[0])))?;
            let sigma: f64 = sg[1]
                .parse()
                .ok()
                .filter(|s: &f64| *s >= 0.0 && s.is_finite())
                .ok_or_else(|| CliError::Usage(format!("bad SmoothGrad sigma {:?}", sg[1])))?;
            config = config.with_smoothgrad(SmoothGrad {
                n_samples,
                sigma,
                seed: self.seed,
            });
        }
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long)]
    pub sample: usize,
    /// `concept:K` or `class:K`.
    #[arg(long)]
    pub target: Target,
    #[arg(long, default_value = "lrp")]
    pub method: String,
    #[command(flatten)]
    pub options: MethodOptions,
    /// Heatmap (binary PPM).
    #[arg(long)]
    pub out: PathBuf,
    /// The reduced grid (concept target) or per-concept relevance (class target).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PointingArgs {
    #[command(flatten)]
    pub source: Source,
    /// Comma-separated methods.
    #[arg(long, default_value = "lrp,grad,ig")]
    pub methods: String,
    /// `CONCEPT=PART,...` by index or name.
    #[arg(long)]
    pub map: String,
    /// Only the first N samples of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub options: MethodOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ContribArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long)]
    pub sample: usize,
    /// `class:K`; defaults to the predicted class.
    #[arg(long)]
    pub target: Option<Target>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterveneArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long)]
    pub sample: usize,
    /// `K=V,...`, concept by index or name.
    #[arg(long)]
    pub set: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Attribute(a) => attribute_cmd(&a),
        Command::Pointing(a) => pointing(&a),
        Command::Contrib(a) => contrib(&a),
        Command::Intervene(a) => intervene_cmd(&a),
        Command::Serve(a) => crate::api::serve(a.source.open()?, &a.host, a.port),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| at(path)(e.into()))
}

fn gen(a: &GenArgs) -> Result<()> {
    let (height, width) = match a.size.as_deref() {
        Some(&[h, w]) => (h, w),
        _ => (64, 64),
    };
    let config = GeneratorConfig {
        height,
        width,
        n_parts: a.parts,
        n_colors: a.colors,
        n_classes: a.classes,
        samples: a.samples,
        seed: a.seed,
        noise: a.noise,
    };
    let dataset = generate_dataset(&config)?;
    save_dataset(&dataset, &a.out).map_err(at(&a.out))?;
    println!(
        "wrote {} train / {} test samples ({height}x{width}, {} concepts, {} classes) to {}",
        dataset.train.len(),
        dataset.test.len(),
        config.n_concepts(),
        config.n_classes,
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.data).map_err(at(&a.data))?;
    let c = &dataset.config;
    let mut model = init_model(
        &[3, c.height, c.width],
        c.concept_names(),
        c.class_names(),
        a.sigmoid,
        a.seed,
    )?;
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        regime: match a.regime {
            RegimeArg::Independent => Regime::Independent,
            RegimeArg::Sequential => Regime::Sequential,
            RegimeArg::Joint => Regime::Joint { lambda: a.lambda },
        },
        epochs: a.epochs.unwrap_or(defaults.epochs),
        class_epochs: a.class_epochs.unwrap_or(defaults.class_epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        momentum: defaults.momentum,
        seed: a.seed,
    };
    config.validate()?;
    let history = train(&mut model, &dataset.train, &config)?;
    if history.iter().any(|r| !r.mean_loss.is_finite()) {
        return Err(CliError::Numeric(cbx_core::Error::NonFiniteValue {
            layer_index: 0,
        }));
    }
    for net in [&model.g, &model.f] {
        if let Some(i) = net
            .layers
            .iter()
            .position(|l| l.params().iter().any(|p| !p.is_finite()))
        {
            return Err(CliError::Numeric(cbx_core::Error::NonFiniteValue {
                layer_index: i,
            }));
        }
    }
    save_model(&model, &a.out).map_err(at(&a.out))?;
    if let Some(path) = &a.history {
        write(path, history_csv(&history)?)?;
    }
    let m = evaluate(&model, &dataset.test)?;
    println!(
        "{} (sigmoid_between={}): test concept_accuracy={} top1_accuracy={} on {} samples",
        config.regime.label(),
        a.sigmoid,
        format_g(m.concept_accuracy),
        format_g(m.top1_accuracy),
        m.samples
    );
    Ok(())
}

fn pick<'a>(session: &'a Session, id: usize) -> Result<&'a cbx_core::synth::SyntheticSample> {
    session.sample(id).ok_or_else(|| {
        CliError::Usage(format!(
            "sample {id} out of range ({} samples in {} split)",
            session.samples().len(),
            session.split
        ))
    })
}

fn attribute_cmd(a: &AttributeArgs) -> Result<()> {
    let session = a.source.open()?;
    let sample = pick(&session, a.sample)?;
    if let Some(msg) = session.target_error(a.target) {
        return usage(msg);
    }
    let config = a.options.config(&a.method)?;
    let ex = session.explain(sample, a.target, &config)?;
    if !ex.values.is_finite() {
        return Err(CliError::Numeric(cbx_core::Error::NonFiniteValue {
            layer_index: 0,
        }));
    }
    write(&a.out, ex.render().to_ppm())?;
    println!(
        "{} {} on sample {}: peak at row {} col {}",
        config.label(),
        a.target,
        a.sample,
        ex.peak.0,
        ex.peak.1
    );
    match a.target {
        Target::Concept(_) => {
            if let Some(path) = &a.csv {
                let &[_, w] = ex.reduced.shape() else {
                    unreachable!("reduced grid is 2-D")
                };
                let (_, _, signed) = cbx_core::render::signed_grid(&ex.values);
                let rows = ex
                    .reduced
                    .data()
                    .iter()
                    .zip(&signed)
                    .enumerate()
                    .map(|(i, (&r, &s))| {
                        vec![
                            (i / w).to_string(),
                            (i % w).to_string(),
                            format_g(s),
                            format_g(r),
                        ]
                    })
                    .collect();
                write(path, table_csv(&["row", "col", "signed", "reduced"], rows)?)?;
            }
        }
        Target::Class(_) => {
            let p = session.predict(sample)?;
            let relevance = ex.values.data();
            let summary = sign_pattern_summary(relevance, &p.concepts.presence)?;
            println!(
                "sign pattern: present_pos={} present_neg={} absent_pos={} absent_neg={} zero={}",
                summary.present_pos,
                summary.present_neg,
                summary.absent_pos,
                summary.absent_neg,
                summary.zero
            );
            if let Some(path) = &a.csv {
                let rows = relevance
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| {
                        let present = p.concepts.presence[i];
                        vec![
                            i.to_string(),
                            session.model.concept_names[i].clone(),
                            format_g(p.bottleneck[i]),
                            present.to_string(),
                            format_g(r),
                            SignClass::of(r, present).label().to_string(),
                        ]
                    })
                    .collect();
                let header = [
                    "concept_id",
                    "concept_name",
                    "concept_value",
                    "present",
                    "relevance",
                    "sign_class",
                ];
                write(path, table_csv(&header, rows)?)?;
            }
        }
    }
    Ok(())
}

/// Resolves an index or a name against `names`.
fn resolve(token: &str, names: &[String], what: &str) -> Result<usize> {
    let token = token.trim();
    if let Ok(i) = token.parse::<usize>() {
        if i < names.len() {
            return Ok(i);
        }
        return usage(format!(
            "{what} index {i} out of range (0..{})",
            names.len()
        ));
    }
    names
        .iter()
        .position(|n| n == token)
        .ok_or_else(|| CliError::Usage(format!("unknown {what} {token:?}")))
}

fn pairs(spec: &str) -> Result<Vec<(&str, &str)>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            item.split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{item:?} is not KEY=VALUE")))
        })
        .collect()
}

fn pointing(a: &PointingArgs) -> Result<()> {
    let session = a.source.open()?;
    let config = &session.dataset.config;
    let part_names = config.part_names();
    let mut map = BTreeMap::new();
    for (concept, part) in pairs(&a.map)? {
        let concept = resolve(concept, &session.model.concept_names, "concept")?;
        let part = resolve(part, &part_names, "part")?;
        map.insert(concept, part);
    }
    if map.is_empty() {
        return usage("--map needs at least one CONCEPT=PART pair");
    }
    let mut samples = session.samples();
    if let Some(n) = a.limit {
        samples = &samples[..n.min(samples.len())];
    }
    let methods: Vec<&str> = a.methods.split(',').map(str::trim).collect();
    let configs = methods
        .iter()
        .map(|m| a.options.config(m))
        .collect::<Result<Vec<_>>>()?;
    let mut results = Vec::new();
    for config in &configs {
        let r = distance_pointing_game(samples, &session.g_canonical, config, &map, &part_names)?;
        for p in &r.parts {
            println!(
                "{:<8} {:<6} n={:<4} skipped={:<4} mean={} shortest10={}",
                r.method,
                p.part_name,
                p.n_samples,
                p.n_skipped,
                p.mean_distance.map_or("-".into(), format_g),
                p.shortest10_mean.map_or("-".into(), format_g)
            );
        }
        results.push(r);
    }
    write(&a.out, pointing_csv(&results)?)?;
    Ok(())
}

fn contrib(a: &ContribArgs) -> Result<()> {
    let session = a.source.open()?;
    let sample = pick(&session, a.sample)?;
    let class = match a.target {
        None => None,
        Some(t @ Target::Class(k)) => {
            if let Some(msg) = session.target_error(t) {
                return usage(msg);
            }
            Some(k)
        }
        Some(Target::Concept(_)) => return usage("contrib --target must be class:K"),
    };
    let report = session.contributions(sample, class)?;
    write(&a.out, contribution_csv(&report)?)?;
    println!(
        "class {} ({}): {}",
        report.target_class,
        report.class_name,
        report.top_summary(3)
    );
    Ok(())
}

fn intervene_cmd(a: &InterveneArgs) -> Result<()> {
    let session = a.source.open()?;
    let sample = pick(&session, a.sample)?;
    let mut overrides = BTreeMap::new();
    for (k, v) in pairs(&a.set)? {
        let k = resolve(k, &session.model.concept_names, "concept")?;
        let v: f64 = v
            .trim()
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| CliError::Usage(format!("bad concept value {v:?}")))?;
        overrides.insert(k, v);
    }
    let (result, _) = session.intervene(sample, &overrides, None)?;
    write(&a.out, intervention_csv(&session.model, &result)?)?;
    let before = cbx_core::tensor::argmax(&result.old_probs);
    let after = cbx_core::tensor::argmax(&result.new_probs);
    println!(
        "predicted class {} ({}) -> {} ({})",
        before, session.model.class_names[before], after, session.model.class_names[after]
    );
    Ok(())
}
