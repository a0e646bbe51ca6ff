use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use hidden_potts::engine::{run_chain, BetaMode, ChainConfig, NoisePriors};
use hidden_potts::eval::{hpd_interval, median, ScoreReport};
use hidden_potts::externalfield::{
    build_field_prior, distance_transform, refresh_field_prior, DeltaHyper, DeltaParams, FieldMode,
    FieldOptions,
};
use hidden_potts::io::{self, ScoreTable};
use hidden_potts::pathsampler::{calibrate as calibrate_table, uniform_grid, CalibrationConfig};
use hidden_potts::phantom::{generate, PhantomSpec};
use hidden_potts::sequential::{
    delta_sufficient_stats, intra_object_mean_distance, posterior_weights,
    update_delta_hyperparams, DeltaPriorState,
};
use hidden_potts::{Error, LatticeSpec, Result};
use serde::Serialize;

use crate::plot;
use crate::Common;

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(['x', ','])
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("cannot parse {what} '{s}'")))
        })
        .collect()
}

fn parse_mode(mode: Option<&str>, n_sites: usize) -> Result<FieldMode> {
    mode.map_or(Ok(FieldMode::auto(n_sites)), str::parse)
}

fn same_lattice(a: &LatticeSpec, b: &LatticeSpec, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{what}: lattice {:?} ({:?} mm) does not match {:?} ({:?} mm)",
            a.dims(),
            a.voxel_size(),
            b.dims(),
            b.voxel_size()
        )));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Phantom description (JSON); missing fields take default values
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Inner-ring rotation in degrees
    #[arg(long)]
    rotation: Option<f64>,
    /// Amplitude of the smooth shading field
    #[arg(long)]
    bias: Option<f64>,
}

pub fn phantom(common: &Common, args: &PhantomArgs) -> Result<()> {
    let mut spec: PhantomSpec = match &args.spec {
        Some(p) => io::read_json(p)?,
        None => PhantomSpec::default(),
    };
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    if let Some(r) = args.rotation {
        spec.rotation_deg = r;
    }
    if let Some(b) = args.bias {
        spec.bias_amplitude = b;
    }
    let (truth, image) = generate(&spec)?;
    let out = &common.out;
    io::write_labels(&out.join("truth.vol"), image.spec(), &truth)?;
    io::write_image(&out.join("image.vol"), &image)?;
    io::write_json(&out.join("phantom.json"), &spec)?;
    plot::labels(&out.join("truth.png"), image.spec(), truth.labels())?;
    plot::grey(&out.join("image.png"), image.spec(), image.values())?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Lattice dimensions, e.g. 128x128
    #[arg(long)]
    dims: Option<String>,
    /// Voxel size in mm, e.g. 0.88x0.88x2
    #[arg(long)]
    voxel_size: Option<String>,
    /// Take the lattice from an existing volume
    #[arg(long)]
    like: Option<PathBuf>,
    /// Number of classes
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    #[arg(long, default_value_t = 2.0)]
    max: f64,
    #[arg(long, default_value_t = 1000)]
    sweeps: usize,
    #[arg(long, default_value_t = 200)]
    burnin: usize,
}

pub fn calibrate(common: &Common, args: &CalibrateArgs) -> Result<()> {
    let spec = match (&args.like, &args.dims) {
        (Some(p), None) => io::read_volume(p)?.0.spec()?,
        (None, Some(d)) => {
            let dims: Vec<usize> = parse_list(d, "dimensions")?;
            let voxel = match &args.voxel_size {
                Some(v) => parse_list(v, "voxel size")?,
                None => vec![1.0; dims.len()],
            };
            LatticeSpec::new(&dims, &voxel)?
        }
        _ => {
            return Err(Error::InvalidConfig(
                "give exactly one of --dims or --like".into(),
            ))
        }
    };
    let cfg = CalibrationConfig {
        grid: uniform_grid(args.step, args.max)?,
        sweeps: args.sweeps,
        burnin: args.burnin,
        seed: common.seed.unwrap_or(0),
    };
    let table = calibrate_table(&spec, args.k, &cfg)?;
    io::write_path_table(&common.out.join("path_table.csv"), &table)?;
    let curve: Vec<(f64, f64)> = table
        .beta_grid()
        .iter()
        .copied()
        .zip(table.expected_stat().iter().copied())
        .collect();
    plot::lines(&common.out.join("path_table.png"), &[curve])
}

#[derive(Debug, Args)]
pub struct FieldArgs {
    /// Reference label volume
    #[arg(long)]
    reference: PathBuf,
    /// Displacement hyperparameters (JSON); overrides --mu-delta/--sd-delta
    #[arg(long)]
    hyper: Option<PathBuf>,
    /// Mean displacement in mm
    #[arg(long, default_value_t = 1.2)]
    mu_delta: f64,
    /// Displacement standard deviation in mm
    #[arg(long, default_value_t = 7.3)]
    sd_delta: f64,
    /// exact or approx; chosen from the lattice size when omitted
    #[arg(long)]
    mode: Option<String>,
    /// Give classes absent from the reference the floor value instead of failing
    #[arg(long)]
    allow_empty: bool,
}

fn hyper_from(path: Option<&Path>, mu: f64, sd: f64) -> Result<DeltaHyper> {
    let hyper = match path {
        Some(p) => io::read_json::<DeltaHyper>(p)?,
        None => {
            let p = DeltaParams::from_sd(mu, sd)?;
            DeltaHyper::new(p.mu_delta, p.sigma2_delta)?
        }
    };
    hyper.validate()?;
    Ok(hyper)
}

pub fn field(common: &Common, args: &FieldArgs) -> Result<()> {
    let (spec, reference) = io::read_labels(&args.reference)?;
    let hyper = hyper_from(args.hyper.as_deref(), args.mu_delta, args.sd_delta)?;
    let options = FieldOptions {
        mode: parse_mode(args.mode.as_deref(), spec.n_sites())?,
        allow_empty_classes: args.allow_empty,
    };
    let prior = build_field_prior(&reference, &spec, &hyper, options)?;
    io::write_field_prior(&common.out.join("field.vol"), &spec, &prior)?;
    plot_field(&common.out, &spec, &prior)
}

/// One probability map per class: the field normalised over classes.
fn plot_field(
    out: &Path,
    spec: &LatticeSpec,
    prior: &hidden_potts::externalfield::FieldPrior,
) -> Result<()> {
    let n = spec.n_sites();
    let mut prob = vec![0.0; prior.k() * n];
    for i in 0..n {
        let max = (0..prior.k())
            .map(|j| prior.value(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = (0..prior.k())
            .map(|j| (prior.value(i, j) - max).exp())
            .sum();
        for j in 0..prior.k() {
            prob[j * n + i] = (prior.value(i, j) - max).exp() / total;
        }
    }
    for j in 0..prior.k() {
        plot::grey(
            &out.join(format!("field_{}.png", j + 1)),
            spec,
            &prob[j * n..(j + 1) * n],
        )?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Image volume
    #[arg(long)]
    image: PathBuf,
    /// Noise priors (JSON); defaults to the nine-class phantom priors
    #[arg(long)]
    priors: Option<PathBuf>,
    /// Path-sampling table (CSV), needed when beta is sampled
    #[arg(long)]
    table: Option<PathBuf>,
    /// External-field prior volume; omit to fit without a field
    #[arg(long)]
    field: Option<PathBuf>,
    /// Ground-truth label volume, for scoring
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Chain configuration (JSON); flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    /// `sample` or `fixed=<value>`
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    /// Column name for the score table
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Debug, Serialize)]
struct ChainSummary {
    iterations: usize,
    burnin: usize,
    thin: usize,
    retained: usize,
    seed: u64,
    use_field: bool,
    sigma_delta: Option<f64>,
    beta_mean: f64,
    beta_hpd95: Option<(f64, f64)>,
    beta_acceptance: f64,
    proposal_sd: f64,
    misclassification: Option<f64>,
}

pub fn segment(common: &Common, args: &SegmentArgs) -> Result<()> {
    let image = io::read_image(&args.image)?;
    let priors: NoisePriors = match &args.priors {
        Some(p) => io::read_json(p)?,
        None => NoisePriors::ed_phantom(),
    };
    let mut cfg: ChainConfig = match &args.config {
        Some(p) => io::read_json(p)?,
        None => ChainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(b) = &args.beta {
        cfg.beta = b.parse::<BetaMode>()?;
    }
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.burnin {
        cfg.burnin = v;
    }
    if let Some(v) = args.thin {
        cfg.thin = v;
    }
    cfg.use_field = args.field.is_some();

    let table = match &args.table {
        Some(p) => Some(io::read_path_table(p)?),
        None => None,
    };
    let field = match &args.field {
        Some(p) => {
            let (spec, f) = io::read_field_prior(p)?;
            same_lattice(&spec, image.spec(), "field prior")?;
            Some(f)
        }
        None => None,
    };
    let truth = match &args.truth {
        Some(p) => {
            let (spec, t) = io::read_labels(p)?;
            same_lattice(&spec, image.spec(), "truth")?;
            Some(t)
        }
        None => None,
    };

    let result = run_chain(
        &image,
        &cfg,
        &priors,
        field.as_ref(),
        table.as_ref(),
        truth.as_ref(),
    )?;
    let out = &common.out;
    let spec = image.spec();
    io::write_labels(&out.join("labels.vol"), spec, &result.modal)?;
    io::write_counts(&out.join("counts.vol"), spec, &result.counts)?;
    io::write_traces_csv(&out.join("traces.csv"), &result)?;
    plot::labels(&out.join("segmentation.png"), spec, result.modal.labels())?;
    let beta_trace: Vec<(f64, f64)> = result
        .traces
        .iter()
        .enumerate()
        .map(|(t, r)| (t as f64, r.beta))
        .collect();
    plot::lines(&out.join("beta_trace.png"), &[beta_trace])?;

    let retained_beta: Vec<f64> = result.retained_rows().map(|r| r.beta).collect();
    let sigma_delta = field.as_ref().map(|f| f.hyper().sigma2_delta.sqrt());
    let beta_mean = result.beta_mean();
    let mut misclassification = None;
    if let Some(t) = &truth {
        let report = ScoreReport::new(&result.modal, t)?;
        misclassification = Some(report.misclassification);
        let variant = args.variant.clone().unwrap_or_else(|| {
            if cfg.use_field {
                "with field"
            } else {
                "without field"
            }
            .to_string()
        });
        let table = ScoreTable::from_report(
            &variant,
            &priors.names(),
            &report,
            &[
                ("beta_mean", Some(beta_mean)),
                ("sigma_delta", sigma_delta),
                ("seed", Some(cfg.seed as f64)),
            ],
        )?;
        io::write_score_csv(&out.join("score.csv"), &table)?;
        io::write_confusion_csv(&out.join("confusion.csv"), &priors.names(), &report)?;
    }
    let summary = ChainSummary {
        iterations: cfg.iterations,
        burnin: cfg.burnin,
        thin: cfg.thin,
        retained: cfg.retained(),
        seed: cfg.seed,
        use_field: cfg.use_field,
        sigma_delta,
        beta_mean,
        beta_hpd95: hpd_interval(&retained_beta, 0.95).ok(),
        beta_acceptance: result.beta_acceptance,
        proposal_sd: result.proposal_sd,
        misclassification,
    };
    io::write_json(&out.join("summary.json"), &summary)
}

#[derive(Debug, Args)]
pub struct UpdateArgs {
    /// Allocation counts from `segment`
    #[arg(long)]
    counts: PathBuf,
    /// Reference label volume the field prior was built from
    #[arg(long)]
    reference: PathBuf,
    /// Current displacement prior state (JSON); built from the flags below when omitted
    #[arg(long)]
    state: Option<PathBuf>,
    /// Displacement hyperparameters (JSON) used to seed a new state
    #[arg(long)]
    hyper: Option<PathBuf>,
    #[arg(long, default_value_t = 1.2)]
    mu_delta: f64,
    #[arg(long, default_value_t = 7.3)]
    sd_delta: f64,
    /// Prior pseudo-count for a new state
    #[arg(long, default_value_t = 25.0)]
    prior_count: f64,
    /// exact or approx, for the refreshed field
    #[arg(long)]
    mode: Option<String>,
    /// Add the mean intra-object distance to each weighted mean distance
    #[arg(long)]
    bias_correction: bool,
}

pub fn update(common: &Common, args: &UpdateArgs) -> Result<()> {
    let (spec, counts) = io::read_counts(&args.counts)?;
    let (ref_spec, reference) = io::read_labels(&args.reference)?;
    same_lattice(&ref_spec, &spec, "reference")?;
    if reference.k() != counts.k() {
        return Err(Error::Shape(format!(
            "reference has {} classes, counts have {}",
            reference.k(),
            counts.k()
        )));
    }
    let state = match &args.state {
        Some(p) => io::read_json::<DeltaPriorState>(p)?,
        None => {
            let hyper = hyper_from(args.hyper.as_deref(), args.mu_delta, args.sd_delta)?;
            let params: Vec<DeltaParams> = (0..reference.k()).map(|j| hyper.for_label(j)).collect();
            DeltaPriorState::from_params(&params, args.prior_count)?
        }
    };
    let weights = posterior_weights(&counts)?;
    let dists = (0..reference.k())
        .map(|j| distance_transform(&reference, &spec, j))
        .collect::<Result<Vec<_>>>()?;
    let mut stats = delta_sufficient_stats(&weights, &dists)?;
    if args.bias_correction {
        let offsets = (0..reference.k())
            .map(|j| intra_object_mean_distance(&reference, &spec, j))
            .collect::<Result<Vec<_>>>()?;
        stats = stats.with_bias_correction(&offsets)?;
    }
    let updated = update_delta_hyperparams(&state, &stats)?;
    let options = FieldOptions::new(parse_mode(args.mode.as_deref(), spec.n_sites())?);
    let prior = refresh_field_prior(&reference, &spec, &updated.to_params()?, options)?;
    let out = &common.out;
    io::write_json(&out.join("delta_state.json"), &updated)?;
    io::write_json(&out.join("delta_stats.json"), &stats)?;
    io::write_weights(&out.join("weights.vol"), &spec, &weights)?;
    io::write_field_prior(&out.join("field.vol"), &spec, &prior)
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Score tables written by `segment`
    scores: Vec<PathBuf>,
}

const RESERVED: [&str; 4] = ["misclassification", "beta_mean", "sigma_delta", "seed"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(io::fmt_f64).unwrap_or_default()
}

pub fn report(common: &Common, args: &ReportArgs) -> Result<()> {
    if args.scores.is_empty() {
        return Err(Error::InvalidConfig("no score tables given".into()));
    }
    let tables = args
        .scores
        .iter()
        .map(|p| io::read_score_csv(p))
        .collect::<Result<Vec<_>>>()?;
    let tissues: Vec<String> = tables[0]
        .rows
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| !RESERVED.contains(&n.as_str()))
        .collect();
    let mut out = String::from("source,variant,sigma_delta,seed,misclassification,beta_mean");
    for t in &tissues {
        out.push(',');
        out.push_str(&t.replace(',', ";"));
    }
    out.push('\n');
    for (path, t) in args.scores.iter().zip(&tables) {
        let source = path.display().to_string().replace(',', ";");
        let variant = t.variant.replace(',', ";");
        out.push_str(&format!(
            "{source},{variant},{},{},{},{}",
            fmt_opt(t.get("sigma_delta")),
            fmt_opt(t.get("seed")),
            fmt_opt(t.get("misclassification")),
            fmt_opt(t.get("beta_mean"))
        ));
        for name in &tissues {
            out.push(',');
            out.push_str(&fmt_opt(t.get(name)));
        }
        out.push('\n');
    }
    std::fs::write(common.out.join("summary.csv"), out)?;

    // medians per prior width, keyed by the bit pattern to keep order stable
    let mut groups: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for t in &tables {
        if let Some(s) = t.get("sigma_delta") {
            let g = groups.entry(s.to_bits()).or_default();
            if let Some(m) = t.get("misclassification") {
                g.0.push(m);
            }
            if let Some(b) = t.get("beta_mean") {
                g.1.push(b);
            }
        }
    }
    if groups.is_empty() {
        return Ok(());
    }
    let mut rows: Vec<(f64, Option<f64>, Option<f64>, usize)> = groups
        .into_iter()
        .map(|(bits, (m, b))| {
            (
                f64::from_bits(bits),
                median(&m).ok(),
                median(&b).ok(),
                m.len().max(b.len()),
            )
        })
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut sens = String::from("sigma_delta,runs,median_misclassification,median_beta\n");
    for (s, m, b, n) in &rows {
        sens.push_str(&format!(
            "{},{n},{},{}\n",
            io::fmt_f64(*s),
            fmt_opt(*m),
            fmt_opt(*b)
        ));
    }
    std::fs::write(common.out.join("sensitivity.csv"), sens)?;
    let mis: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.1.map(|m| (r.0, m))).collect();
    let beta: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.2.map(|b| (r.0, b))).collect();
    if !mis.is_empty() {
        plot::lines(&common.out.join("misclassification_vs_sigma.png"), &[mis])?;
    }
    if !beta.is_empty() {
        plot::lines(&common.out.join("beta_vs_sigma.png"), &[beta])?;
    }
    Ok(())
}
