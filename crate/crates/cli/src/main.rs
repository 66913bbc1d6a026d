//! `conceptmil`: seeded, reproducible runs of every pipeline stage.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use conceptmil::classifier;
use conceptmil::concepts::{self, ConceptAssignment};
use conceptmil::eval::{self, Evaluation, FoldOutcome};
use conceptmil::fractions::{self, BootstrapConfig};
use conceptmil::render::{self, Palette};
use conceptmil::synth::{self, ShiftRestriction};
use conceptmil::{
    load_cohort, mil, persist, report, save_cohort, Class, Cohort, ConceptModel, ConceptSpace,
    Error, FitMetadata, FractionMode, Method, MethodReport, MilParams,
};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "conceptmil", version, about = "Concept discovery over attention MIL models")]
struct Cli {
    /// TOML run configuration; flags given on the command line win
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunConfig,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Out {
    /// Run directory receiving every output
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Inputs {
    /// Cohort manifest
    #[arg(long)]
    cohort: PathBuf,
    /// MIL model file, required for h-space concepts
    #[arg(long)]
    mil: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Fitted {
    #[command(flatten)]
    inputs: Inputs,
    /// Concept model file
    #[arg(long)]
    concepts: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Shift {
    None,
    /// Orthogonal to every concept mean
    Orthogonal,
    /// Along the difference of the two informative concepts
    Concept,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Raw,
    Aw,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted-concept cohort
    Synth {
        #[command(flatten)]
        out: Out,
        /// Also write survival labels agreeing with the class at this correlation
        #[arg(long)]
        survival_correlation: Option<f64>,
        /// Move every concept mean before sampling
        #[arg(long, value_enum, default_value = "none")]
        shift: Shift,
        /// Shift length in units of sigma
        #[arg(long, default_value_t = 3.0)]
        shift_norm: f64,
        /// Keep only the slides of one class
        #[arg(long)]
        only_class: Option<Class>,
    },
    /// Train the attention MIL backbone on every labeled slide
    TrainMil {
        #[arg(long)]
        cohort: PathBuf,
        #[command(flatten)]
        out: Out,
    },
    /// Fit K concepts over every slide
    Discover {
        #[command(flatten)]
        inputs: Inputs,
        /// Concept space: aw_h, raw_h or encoder
        #[arg(long, default_value = "aw_h")]
        space: ConceptSpace,
        #[command(flatten)]
        out: Out,
    },
    /// WCSS over a range of K with the second-difference choice
    Elbow {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value = "aw_h")]
        space: ConceptSpace,
        #[arg(long, default_value_t = 1)]
        k_min: usize,
        #[arg(long, default_value_t = 15)]
        k_max: usize,
        #[command(flatten)]
        out: Out,
    },
    /// Per-slide concept fractions and class-averaged profiles
    Fractions {
        #[command(flatten)]
        fitted: Fitted,
        /// Must match the concept space: aw for aw_h, raw otherwise
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[command(flatten)]
        out: Out,
    },
    /// Fit the rule classifier on every labeled slide
    FitRule {
        #[command(flatten)]
        fitted: Fitted,
        #[command(flatten)]
        out: Out,
    },
    /// Stratified cross-validation of one or more methods
    Evaluate {
        #[arg(long)]
        cohort: PathBuf,
        /// aw_h, raw_h, encoder, heatmap, mil_base or logistic
        #[arg(long, value_delimiter = ',', default_value = "aw_h")]
        method: Vec<Method>,
        #[command(flatten)]
        out: Out,
    },
    /// Apply a frozen pipeline to an external cohort
    Transfer {
        #[command(flatten)]
        fitted: Fitted,
        /// Rule classifier file
        #[arg(long)]
        classifier: PathBuf,
        #[command(flatten)]
        out: Out,
    },
    /// Refit the rule against survival labels with frozen backbone and concepts
    Survival {
        #[command(flatten)]
        fitted: Fitted,
        #[command(flatten)]
        out: Out,
    },
    /// Concept maps, high-attention maps and the fraction chart
    Render {
        #[command(flatten)]
        fitted: Fitted,
        /// Slides to map; all slides when omitted
        #[arg(long, value_delimiter = ',')]
        slide: Vec<String>,
        #[command(flatten)]
        out: Out,
    },
    /// Tiles nearest each concept centroid across all slides
    TopTiles {
        #[command(flatten)]
        fitted: Fitted,
        #[arg(long, default_value_t = 8)]
        m: usize,
        #[command(flatten)]
        out: Out,
    },
    /// Per-fold recovery score of a method against a base method
    Recovery {
        /// Metrics table written by `evaluate`
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value = "aw_h")]
        method: String,
        #[arg(long, default_value = "mil_base")]
        base: String,
        #[command(flatten)]
        out: Out,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli, &args[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("{}: {e}", e.category());
            ExitCode::from(if e.is_numerical() { 4 } else { 3 })
        }
    }
}

fn run(cli: Cli, args: &[String]) -> CliResult<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    }
    .overlay(&cli.run);
    if let Some(t) = config.threads {
        if t == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot start thread pool: {e}")))?;
    }
    let out = out_dir(&cli.command);
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    report::write_table(&out.join("run_config.toml"), &config::echo_string(args, &config))?;
    dispatch(&cli.command, &config)
}

fn out_dir(cmd: &Command) -> &Path {
    match cmd {
        Command::Synth { out, .. }
        | Command::TrainMil { out, .. }
        | Command::Discover { out, .. }
        | Command::Elbow { out, .. }
        | Command::Fractions { out, .. }
        | Command::FitRule { out, .. }
        | Command::Evaluate { out, .. }
        | Command::Transfer { out, .. }
        | Command::Survival { out, .. }
        | Command::Render { out, .. }
        | Command::TopTiles { out, .. }
        | Command::Recovery { out, .. } => &out.out,
    }
}

fn dispatch(cmd: &Command, config: &RunConfig) -> CliResult<()> {
    match cmd {
        Command::Synth {
            out,
            survival_correlation,
            shift,
            shift_norm,
            only_class,
        } => synth_cmd(config, &out.out, *survival_correlation, *shift, *shift_norm, *only_class),
        Command::TrainMil { cohort, out } => train_mil(config, cohort, &out.out),
        Command::Discover { inputs, space, out } => discover(config, inputs, *space, &out.out),
        Command::Elbow {
            inputs,
            space,
            k_min,
            k_max,
            out,
        } => elbow(config, inputs, *space, *k_min, *k_max, &out.out),
        Command::Fractions { fitted, mode, out } => fractions_cmd(config, fitted, *mode, &out.out),
        Command::FitRule { fitted, out } => fit_rule(fitted, &out.out),
        Command::Evaluate {
            cohort,
            method,
            out,
        } => evaluate(config, cohort, method, &out.out),
        Command::Transfer {
            fitted,
            classifier,
            out,
        } => transfer(fitted, classifier, &out.out),
        Command::Survival { fitted, out } => survival(config, fitted, &out.out),
        Command::Render { fitted, slide, out } => render_cmd(config, fitted, slide, &out.out),
        Command::TopTiles { fitted, m, out } => top_tiles(fitted, *m, &out.out),
        Command::Recovery {
            metrics,
            method,
            base,
            out,
        } => recovery(metrics, method, base, &out.out),
    }
}

fn load_mil(path: Option<&PathBuf>) -> CliResult<Option<MilParams>> {
    Ok(path.map(|p| persist::load_mil(p)).transpose()?)
}

fn load_fitted(f: &Fitted) -> CliResult<(Cohort, Option<MilParams>, ConceptModel)> {
    let cohort = load_cohort(&f.inputs.cohort)?;
    let mil = load_mil(f.inputs.mil.as_ref())?;
    let model = persist::load_concept_model(&f.concepts)?;
    if model.space.needs_mil() && mil.is_none() {
        return Err(Failure::Usage(format!(
            "concept model in space `{}` needs --mil",
            model.space
        )));
    }
    Ok((cohort, mil, model))
}

fn all(cohort: &Cohort) -> Vec<usize> {
    (0..cohort.len()).collect()
}

fn synth_cmd(
    config: &RunConfig,
    out: &Path,
    survival_correlation: Option<f64>,
    shift: Shift,
    shift_norm: f64,
    only_class: Option<Class>,
) -> CliResult<()> {
    let spec = config.synthetic();
    let seed = config.seed();
    let (mut cohort, truth) = match shift {
        Shift::None => synth::generate(&spec)?,
        Shift::Orthogonal | Shift::Concept => {
            let means = spec.resolve_means()?;
            let norm = shift_norm * spec.sigma;
            let (vector, restriction) = if shift == Shift::Orthogonal {
                (synth::orthogonal_shift(&means, norm, seed)?, ShiftRestriction::Orthogonal)
            } else {
                let (a, b) = match spec.informative.as_slice() {
                    [a, b, ..] => (*a, *b),
                    _ => (0, 1),
                };
                (synth::concept_difference_shift(&means, a, b, norm)?, ShiftRestriction::Unrestricted)
            };
            synth::shifted_external(&spec, &vector, restriction, seed.wrapping_add(1))?
        }
    };
    let mut truth = truth;
    if let Some(class) = only_class {
        let keep: Vec<usize> = (0..cohort.len())
            .filter(|&i| cohort.slides[i].label == Some(class))
            .collect();
        truth.planted = keep.iter().map(|&i| truth.planted[i].clone()).collect();
        truth.mixtures = keep.iter().map(|&i| truth.mixtures[i].clone()).collect();
        cohort = cohort.subset(&keep);
    }
    let manifest = save_cohort(&cohort, out)?;
    synth::write_ground_truth(&out.join("ground_truth.csv"), &cohort, &truth)?;
    if let Some(r) = survival_correlation {
        let relabeled = synth::correlated_labels(&cohort, r, seed.wrapping_add(2))?;
        save_cohort(&relabeled, &out.join("survival"))?;
    }
    println!("{}", manifest.display());
    Ok(())
}

fn train_mil(config: &RunConfig, cohort: &Path, out: &Path) -> CliResult<()> {
    let cohort = load_cohort(cohort)?;
    let model = mil::train(&cohort, &config.pipeline().train)?;
    persist::save_mil(&model.params, &out.join("mil.txt"))?;
    let mut losses = String::from("epoch,loss\n");
    for (e, l) in model.epoch_losses.iter().enumerate() {
        losses.push_str(&format!("{e},{}\n", conceptmil::fmt_f64(*l)));
    }
    report::write_table(&out.join("epoch_losses.csv"), &losses)?;
    Ok(())
}

fn assignments(
    cohort: &Cohort,
    model: &ConceptModel,
    mil: Option<&MilParams>,
) -> CliResult<Vec<(ConceptAssignment, Vec<u64>)>> {
    cohort
        .slides
        .iter()
        .map(|bag| {
            let a = concepts::assign(model, bag, mil)?;
            Ok((a, bag.tiles.iter().map(|t| t.tile_id).collect()))
        })
        .collect()
}

fn discover(config: &RunConfig, inputs: &Inputs, space: ConceptSpace, out: &Path) -> CliResult<()> {
    let cohort = load_cohort(&inputs.cohort)?;
    let mil = load_mil(inputs.mil.as_ref())?;
    if space.needs_mil() && mil.is_none() {
        return Err(Failure::Usage(format!("concept space `{space}` needs --mil")));
    }
    let p = config.pipeline();
    let model = concepts::discover(&cohort, &all(&cohort), mil.as_ref(), space, p.k, &p.kmeans)?;
    persist::save_concept_model(&model, &out.join("concepts.txt"))?;
    let rows = assignments(&cohort, &model, mil.as_ref())?;
    report::write_table(&out.join("assignments.csv"), &report::assignments_table(&rows))?;
    Ok(())
}

fn elbow(
    config: &RunConfig,
    inputs: &Inputs,
    space: ConceptSpace,
    k_min: usize,
    k_max: usize,
    out: &Path,
) -> CliResult<()> {
    if k_min == 0 || k_min > k_max {
        return Err(Failure::Usage(format!("empty k range {k_min}..={k_max}")));
    }
    let cohort = load_cohort(&inputs.cohort)?;
    let mil = load_mil(inputs.mil.as_ref())?;
    if space.needs_mil() && mil.is_none() {
        return Err(Failure::Usage(format!("concept space `{space}` needs --mil")));
    }
    let range: Vec<usize> = (k_min..=k_max).collect();
    let curve = concepts::elbow_for_cohort(
        &cohort,
        &all(&cohort),
        mil.as_ref(),
        space,
        &range,
        &config.pipeline().kmeans,
    )?;
    report::write_table(&out.join("elbow.csv"), &report::elbow_table(&curve))?;
    println!("{}", curve.selected);
    Ok(())
}

fn fractions_cmd(config: &RunConfig, fitted: &Fitted, mode: Option<Mode>, out: &Path) -> CliResult<()> {
    let (cohort, mil, model) = load_fitted(fitted)?;
    let native = eval::fraction_mode_for(model.space);
    let mode = match mode {
        None => native,
        Some(Mode::Raw) => FractionMode::Raw,
        Some(Mode::Aw) => FractionMode::AttentionWeighted,
    };
    if mode != native {
        return Err(Error::Invalid(format!(
            "concept model in space `{}` is incompatible with {} fractions",
            model.space,
            mode.as_str()
        ))
        .into());
    }
    let per_slide = concepts::cohort_points(&cohort, &all(&cohort), mil.as_ref(), model.space)?;
    let rows = cohort
        .slides
        .iter()
        .zip(&per_slide)
        .map(|(bag, sp)| {
            Ok((bag.slide_id.clone(), eval::fraction_vector(&model, sp, &bag.slide_id, mode)?))
        })
        .collect::<CliResult<Vec<_>>>()?;
    report::write_table(&out.join("fractions.csv"), &report::fractions_table(&rows))?;
    let labeled: Vec<_> = rows
        .iter()
        .zip(&cohort.slides)
        .filter_map(|((_, v), bag)| bag.label.map(|c| (v.clone(), c)))
        .collect();
    let classes = cohort.class_counts();
    if classes.len() == 2 {
        let avg = fractions::class_averages(
            &labeled,
            BootstrapConfig {
                reps: config.bootstrap_reps(),
                seed: config.seed(),
            },
        )?;
        report::write_table(&out.join("class_averages.csv"), &report::class_average_table(&avg))?;
    }
    Ok(())
}

fn labeled_fractions(
    cohort: &Cohort,
    mil: Option<&MilParams>,
    model: &ConceptModel,
) -> CliResult<Vec<(conceptmil::ConceptFractionVector, Class)>> {
    let labeled = cohort.labeled_indices();
    let per_slide = concepts::cohort_points(cohort, &labeled, mil, model.space)?;
    let mode = eval::fraction_mode_for(model.space);
    labeled
        .iter()
        .zip(&per_slide)
        .map(|(&i, sp)| {
            let s = &cohort.slides[i];
            Ok((eval::fraction_vector(model, sp, &s.slide_id, mode)?, s.label.unwrap()))
        })
        .collect()
}

fn fit_rule(fitted: &Fitted, out: &Path) -> CliResult<()> {
    let (cohort, mil, model) = load_fitted(fitted)?;
    let train = labeled_fractions(&cohort, mil.as_ref(), &model)?;
    let clf = classifier::fit_rule_with(
        &train,
        FitMetadata {
            cohort: cohort.cohort_id.clone(),
            fold: None,
            label_kind: cohort.label_kind.as_str().to_string(),
        },
    )?;
    persist::save_classifier(&clf, &out.join("classifier.txt"))?;
    Ok(())
}

fn evaluate(config: &RunConfig, cohort: &Path, methods: &[Method], out: &Path) -> CliResult<()> {
    let cohort = load_cohort(cohort)?;
    let reports = eval::run_methods(&cohort, methods, &config.pipeline())?;
    report::write_table(&out.join("metrics.csv"), &report::metrics_table(&reports))?;
    for r in &reports {
        let preds: Vec<_> = r.folds.iter().flat_map(|f| f.predictions.clone()).collect();
        report::write_table(
            &out.join(format!("predictions_{}.csv", r.method)),
            &report::predictions_table(&preds),
        )?;
    }
    Ok(())
}

fn single_report(method: &str, eval: Evaluation) -> CliResult<MethodReport> {
    let summary = conceptmil::metrics::aggregate_folds(&[eval.metrics])?;
    Ok(MethodReport {
        method: method.to_string(),
        folds: vec![FoldOutcome {
            fold: 0,
            metrics: eval.metrics,
            predictions: eval.predictions,
            bundle: None,
        }],
        summary,
    })
}

fn transfer(fitted: &Fitted, classifier: &Path, out: &Path) -> CliResult<()> {
    let external = load_cohort(&fitted.inputs.cohort)?;
    let mil = load_mil(fitted.inputs.mil.as_ref())?;
    let model = persist::load_concept_model(&fitted.concepts)?;
    let clf = persist::load_classifier(classifier)?;
    let bundle = eval::PipelineBundle::new(mil, model, clf)?;
    let result = eval::transfer(&bundle, &external)?;
    report::write_table(&out.join("predictions.csv"), &report::predictions_table(&result.predictions))?;
    let r = single_report("transfer", result)?;
    report::write_table(&out.join("metrics.csv"), &report::metrics_table(&[r]))?;
    Ok(())
}

fn survival(config: &RunConfig, fitted: &Fitted, out: &Path) -> CliResult<()> {
    let (cohort, mil, model) = load_fitted(fitted)?;
    let r = eval::survival_eval(&cohort, mil.as_ref(), &model, &config.pipeline())?;
    report::write_table(&out.join("metrics.csv"), &report::metrics_table(&[r]))?;
    Ok(())
}

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn render_cmd(config: &RunConfig, fitted: &Fitted, slides: &[String], out: &Path) -> CliResult<()> {
    let (cohort, mil, model) = load_fitted(fitted)?;
    let palette = Palette::for_k(model.k());
    let cell = config.cell();
    if cell == 0 {
        return Err(Failure::Usage("--cell must be at least 1".into()));
    }
    let top_fraction = config.top_fraction();
    let picked: Vec<usize> = if slides.is_empty() {
        all(&cohort)
    } else {
        slides
            .iter()
            .map(|id| {
                cohort
                    .slides
                    .iter()
                    .position(|s| &s.slide_id == id)
                    .ok_or_else(|| Error::Invalid(format!("slide `{id}` not in cohort")).into())
            })
            .collect::<CliResult<_>>()?
    };
    for &i in &picked {
        let bag = &cohort.slides[i];
        let name = safe_name(&bag.slide_id);
        let asg = concepts::assign(&model, bag, mil.as_ref())?;
        render::concept_map(bag, &asg, &palette, cell)?
            .write_ppm(&out.join(format!("concept_map_{name}.ppm")))?;
        report::write_table(
            &out.join(format!("concept_map_{name}.csv")),
            &render::map_sidecar(bag, &asg, None),
        )?;
        if let Some(params) = &mil {
            let fwd = mil::forward(params, bag)?;
            let alpha = fwd.alpha_rescaled.to_vec();
            let (raster, top) =
                render::high_attention_map(bag, &asg, &alpha, top_fraction, &palette, cell)?;
            raster.write_ppm(&out.join(format!("attention_{name}.ppm")))?;
            report::write_table(
                &out.join(format!("attention_{name}.csv")),
                &render::map_sidecar(bag, &asg, Some(&top)),
            )?;
        }
    }
    if cohort.class_counts().len() == 2 {
        let vectors = labeled_fractions(&cohort, mil.as_ref(), &model)?;
        let avg = fractions::class_averages(
            &vectors,
            BootstrapConfig {
                reps: config.bootstrap_reps(),
                seed: config.seed(),
            },
        )?;
        render::fraction_chart(&avg, &palette)?.write_ppm(&out.join("fraction_chart.ppm"))?;
        report::write_table(&out.join("fraction_chart.csv"), &report::class_average_table(&avg))?;
    }
    Ok(())
}

fn top_tiles(fitted: &Fitted, m: usize, out: &Path) -> CliResult<()> {
    let (cohort, mil, model) = load_fitted(fitted)?;
    let tiles = render::representative_tiles(&cohort, &all(&cohort), mil.as_ref(), &model, m)?;
    report::write_table(&out.join("representative_tiles.csv"), &report::representative_table(&tiles))?;
    Ok(())
}

fn recovery(metrics: &Path, method: &str, base: &str, out: &Path) -> CliResult<()> {
    let rows = report::read_metrics_table(metrics)?;
    let pick = |name: &str| -> Vec<_> { rows.iter().filter(|r| r.method == name).collect() };
    let (a, b) = (pick(method), pick(base));
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid(format!(
            "{} lacks rows for `{method}` or `{base}`",
            metrics.display()
        ))
        .into());
    }
    if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.fold != y.fold) {
        return Err(Error::Invalid("method and base folds do not line up".into()).into());
    }
    let scores = a
        .iter()
        .zip(&b)
        .map(|(x, y)| conceptmil::metrics::recovery(&x.metrics, &y.metrics))
        .collect::<Result<Vec<_>, _>>()?;
    report::write_table(&out.join("recovery.csv"), &report::recovery_table(method, &scores))?;
    let mean = scores.iter().map(|s| s.s).sum::<f64>() / scores.len() as f64;
    println!("{}", conceptmil::fmt_f64(mean));
    Ok(())
}
