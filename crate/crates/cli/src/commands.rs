use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use patchfeas::archspec::{load_spec, propagate_shapes, NetworkSpec, Shape3, SpecError};
use patchfeas::attack::{
    auto_placement, build_target, measure_effect, momentum_patch_attack, AttackConfig, AttackError,
    PatchSpec, TargetKind,
};
use patchfeas::geometry::{center_patch, largest_inscribed_rect, BinaryMask, GeometryError};
use patchfeas::regions::{
    conv_region_bound, conv_region_factors, count_regions_exact, feasible_region, generic_params,
    layer_multiplier, BigCount, BoundMode, FeasibilityQuery, Magnitude, RegionError,
    REFERENCE_LOG10,
};
use patchfeas::report::{
    build_report, feasibility_to_csv, parse_feasibility_csv, parse_metrics_json, AttackMetrics,
    FeasibilityRow, ReportError,
};
use patchfeas::rfield::{influence_region, receptive_field, RfError};
use patchfeas::segnet::dataset::{
    gen_shapes_dataset, load_dataset, save_dataset, DatasetMeta, ShapeClass,
};
use patchfeas::segnet::pnm::{
    gray_to_pnm, pnm_to_gray, pnm_to_rgb, read_pnm, rgb_to_pnm, write_pnm, PnmError,
};
use patchfeas::segnet::train::{train, TrainConfig};
use patchfeas::segnet::{argmax_map, read_model, EngineError, Network};

use crate::manifest::Manifest;
use crate::{
    AttackArgs, BoundsArgs, Cli, Command, CountArgs, FeasibilityArgs, GenDataArgs, Global,
    PlaceArgs, ReportArgs, RfArgs, TrainArgs,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(
    std::io::Error,
    SpecError,
    PnmError,
    RfError,
    GeometryError,
    ReportError,
    serde_json::Error
);

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Engine(e) => e.into(),
            AttackError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            AttackError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<RegionError> for CliError {
    fn from(e: RegionError) -> Self {
        match e {
            RegionError::Engine(e) => e.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    match cli.command {
        Command::Bounds(a) => bounds(&g, a),
        Command::Feasibility(a) => feasibility(&g, a),
        Command::Rf(a) => rf(&g, a),
        Command::Place(a) => place(a),
        Command::CountRegions(a) => count_regions(&g, a),
        Command::GenData(a) => gen_data(&g, a),
        Command::Train(a) => train_cmd(&g, a),
        Command::Attack(a) => attack(&g, a),
        Command::Report(a) => report(&g, a),
        Command::Verify(a) => verify(&a.manifest),
    }
}

fn argv() -> Vec<String> {
    std::env::args().collect()
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn write_manifest(g: &Global, subcommand: &str, at: &Path, artifacts: &[PathBuf]) -> Result<()> {
    Manifest::new(subcommand, argv(), g.seed, g.workers, artifacts)?.write(at)?;
    Ok(())
}

/// Print `text`, or write it to `out` together with a manifest.
fn emit(g: &Global, subcommand: &str, out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text)?;
            write_manifest(g, subcommand, &manifest_path(path), &[path.to_path_buf()])
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn spec_from(path: &Path) -> Result<NetworkSpec> {
    let spec =
        load_spec(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))??;
    Ok(propagate_shapes(&spec, spec.input)?)
}

fn parse_mode(s: &str) -> Result<Vec<BoundMode>> {
    match s {
        "all" => Ok(vec![BoundMode::AsPrinted, BoundMode::PerLayerInput]),
        other => Ok(vec![other.parse().map_err(usage)?]),
    }
}

fn parse_hw(s: &str) -> Result<(usize, usize)> {
    let bad = || usage(format!("expected HxW, got `{s}`"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    Ok((
        h.trim().parse().map_err(|_| bad())?,
        w.trim().parse().map_err(|_| bad())?,
    ))
}

fn parse_shape(s: &str) -> Result<Shape3> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| usage(format!("expected C,H,W, got `{s}`")))
        })
        .collect::<Result<_>>()?;
    match parts[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Shape3::new(c, h, w)),
        _ => Err(usage(format!("expected positive C,H,W, got `{s}`"))),
    }
}

const SWEEP_CHANNELS: [usize; 11] = [1, 2, 3, 4, 5, 6, 7, 8, 16, 32, 64];

fn scientific(b: &BigCount) -> String {
    let (exp, frac) = b.log10_parts();
    format!("{:.2}e{exp}", 10f64.powf(frac))
}

fn bounds(g: &Global, a: BoundsArgs) -> Result<()> {
    let mut out = String::new();
    if a.sweep {
        out.push_str("c0,in_vol,out_vol,log10_factor,approx\n");
        let output = Shape3::new(64, 25, 25);
        for c0 in SWEEP_CHANNELS {
            let input = Shape3::new(c0, 25, 25);
            let f = layer_multiplier(input, output);
            out.push_str(&format!(
                "{c0},{},{},{:.6},{}\n",
                input.volume(),
                output.volume(),
                f.log10(),
                scientific(&f)
            ));
        }
    } else {
        let spec = spec_from(a.spec.as_deref().expect("clap requires --spec"))?;
        let input = a
            .input
            .as_deref()
            .map(parse_shape)
            .transpose()?
            .unwrap_or(spec.input);
        let mode = a.mode.parse().map_err(usage)?;
        out.push_str("layer_index,in_vol,out_vol,log10_factor,cumulative_log10\n");
        let mut cumulative = BigCount::one();
        for f in conv_region_factors(&spec, input, mode)? {
            cumulative = &cumulative * &f.factor;
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                f.layer_index,
                f.in_vol,
                f.out_vol,
                f.factor.log10(),
                cumulative.log10()
            ));
        }
    }
    emit(g, "bounds", a.out.as_deref(), &out)
}

fn feasibility_row(
    arch: &str,
    (h, w): (usize, usize),
    mode: &str,
    bound: Magnitude,
    classes: u32,
) -> FeasibilityRow {
    let log10_bound = bound.log10();
    let r = feasible_region(&FeasibilityQuery { bound, classes });
    if r.ambiguous {
        tracing::warn!(
            arch,
            log10_bound,
            "bound/log10(D) is within rounding of an integer; max_area may be off by one"
        );
    }
    FeasibilityRow {
        arch: arch.to_string(),
        patch_h: h,
        patch_w: w,
        mode: mode.to_string(),
        log10_bound,
        classes,
        max_area: r.max_area,
        max_side: r.max_side,
    }
}

fn feasibility(g: &Global, a: FeasibilityArgs) -> Result<()> {
    if a.classes < 2 {
        return Err(usage("--classes must be at least 2"));
    }
    let patches: Vec<(usize, usize)> = a
        .patches
        .iter()
        .map(|p| parse_hw(p))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    if let Some(l) = a.log10 {
        if !(l.is_finite() && l >= 0.0) {
            return Err(usage("--log10 must be a finite nonnegative number"));
        }
        let patch = patches.first().copied().unwrap_or((0, 0));
        rows.push(feasibility_row(
            &a.arch,
            patch,
            "log10",
            Magnitude::Log10(l),
            a.classes,
        ));
    } else if a.preset.is_some() {
        for (arch, cells) in REFERENCE_LOG10 {
            for (side, l) in cells {
                rows.push(feasibility_row(
                    arch,
                    (side, side),
                    "log10",
                    Magnitude::Log10(l),
                    a.classes,
                ));
            }
        }
    } else if let Some(path) = &a.spec {
        let spec = spec_from(path)?;
        let patches = if patches.is_empty() {
            vec![(2, 2), (5, 5), (10, 10), (20, 20)]
        } else {
            patches
        };
        for mode in parse_mode(&a.mode)? {
            for &(h, w) in &patches {
                let bound = conv_region_bound(&spec, Shape3::new(spec.input.c, h, w), mode)?;
                rows.push(feasibility_row(
                    &spec.name,
                    (h, w),
                    mode.as_str(),
                    Magnitude::Exact(bound),
                    a.classes,
                ));
            }
        }
    } else {
        return Err(usage("one of --log10, --spec or --preset is required"));
    }
    emit(
        g,
        "feasibility",
        a.out.as_deref(),
        &feasibility_to_csv(&rows),
    )
}

fn rf(g: &Global, a: RfArgs) -> Result<()> {
    let spec = spec_from(&a.spec)?;
    emit(g, "rf", a.out.as_deref(), &receptive_field(&spec)?.to_csv())
}

fn read_labels(path: &Path) -> Result<Array2<u8>> {
    Ok(pnm_to_gray(&read_pnm(path)?)?)
}

fn place(a: PlaceArgs) -> Result<()> {
    let labels = read_labels(&a.mask)?;
    let rect = largest_inscribed_rect(&BinaryMask::from_labels(&labels, a.class))?;
    let patch = match a.patch.as_deref().map(parse_hw).transpose()? {
        Some((h, w)) => {
            let (top, left) = center_patch(&rect, h, w)?;
            serde_json::json!({ "top": top, "left": left, "height": h, "width": w })
        }
        None => serde_json::Value::Null,
    };
    let out = serde_json::json!({ "class": a.class, "rect": rect, "patch": patch });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn count_regions(g: &Global, a: CountArgs) -> Result<()> {
    let spec = spec_from(&a.spec)?;
    let (lo, hi) = a
        .domain
        .split_once(',')
        .and_then(|(l, h)| Some((l.trim().parse::<f64>().ok()?, h.trim().parse::<f64>().ok()?)))
        .filter(|(l, h)| l < h)
        .ok_or_else(|| usage(format!("expected LO,HI with LO < HI, got `{}`", a.domain)))?;
    let params = generic_params(&spec, g.seed)?;
    let domain = vec![(lo, hi); spec.input.volume()];
    let count = count_regions_exact(&spec, &params, &domain, a.resolution)?;
    let bound = conv_region_bound(&spec, spec.input, BoundMode::PerLayerInput)?;
    let out = serde_json::json!({
        "count": count,
        "bound": bound.to_string(),
        "resolution": a.resolution,
        "seed": g.seed,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn gen_data(g: &Global, a: GenDataArgs) -> Result<()> {
    if a.size < 32 {
        return Err(usage("--size must be at least 32"));
    }
    let samples = gen_shapes_dataset(a.count, a.size, g.seed);
    let meta = DatasetMeta {
        seed: g.seed,
        count: a.count,
        size: a.size,
    };
    let written = save_dataset(&a.out, &samples, &meta)?;
    write_manifest(g, "gen-data", &a.out.join("manifest.json"), &written)
}

fn train_cmd(g: &Global, a: TrainArgs) -> Result<()> {
    let spec = spec_from(&a.spec)?;
    let (_, train_set) = load_dataset(&a.data)?;
    let (_, val_set) = load_dataset(&a.val)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        momentum: a.momentum,
        batch_size: a.batch,
        seed: g.seed,
        workers: g.workers,
    };
    let outcome = train::<f32>(&spec, &train_set, &val_set, &cfg)?;
    let mut file = std::fs::File::create(&a.out)?;
    outcome.params.write_to(&spec, &mut file)?;
    let log_path = a.out.with_extension("epochs.csv");
    let mut log = String::from("epoch,train_loss,val_accuracy\n");
    for e in &outcome.epochs {
        log.push_str(&format!(
            "{},{},{}\n",
            e.epoch, e.train_loss, e.val_accuracy
        ));
    }
    std::fs::write(&log_path, log)?;
    write_manifest(
        g,
        "train",
        &manifest_path(&a.out),
        &[a.out.clone(), log_path],
    )
}

fn parse_class(s: &str) -> Result<u8> {
    if s == "background" {
        return Ok(0);
    }
    ShapeClass::from_name(s)
        .map(ShapeClass::label)
        .or_else(|| s.parse().ok())
        .ok_or_else(|| usage(format!("unknown class `{s}`")))
}

fn parse_target(s: &str) -> Result<TargetKind> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts[..] {
        ["class_switch", from, to] => Ok(TargetKind::ClassSwitch {
            from: parse_class(from)?,
            to: parse_class(to)?,
        }),
        ["erase", class] => Ok(TargetKind::Erase {
            class: parse_class(class)?,
        }),
        ["custom", path] => Ok(TargetKind::Custom(read_labels(Path::new(path))?)),
        _ => Err(usage(format!(
            "expected class_switch:FROM:TO, erase:CLASS or custom:MASK.pgm, got `{s}`"
        ))),
    }
}

enum Placement {
    At(usize, usize),
    Auto,
}

fn parse_patch(s: &str) -> Result<((usize, usize), Placement)> {
    let (hw, at) = s
        .split_once('@')
        .ok_or_else(|| usage(format!("expected HxW@TOP,LEFT or HxW@auto, got `{s}`")))?;
    let size = parse_hw(hw)?;
    let placement = if at == "auto" {
        Placement::Auto
    } else {
        let (t, l) = at
            .split_once(',')
            .and_then(|(t, l)| Some((t.trim().parse().ok()?, l.trim().parse().ok()?)))
            .ok_or_else(|| usage(format!("bad patch position `{at}`")))?;
        Placement::At(t, l)
    };
    Ok((size, placement))
}

fn attack(g: &Global, a: AttackArgs) -> Result<()> {
    let kind = parse_target(&a.target)?;
    let ((ph, pw), placement) = parse_patch(&a.patch)?;
    let (spec, params) = read_model::<f32>(std::fs::File::open(&a.model)?)?;
    let net = Network::new(spec.clone(), params)?;
    let image = pnm_to_rgb(&read_pnm(&a.image)?)?;
    if image.dim() != (spec.input.c, spec.input.h, spec.input.w) {
        return Err(CliError::Data(format!(
            "image is {:?} but the model expects {}",
            image.dim(),
            spec.input
        )));
    }
    let labels = match &a.labels {
        Some(p) => read_labels(p)?,
        None => argmax_map(&net.logits(&image.clone().insert_axis(Axis(0)))?)
            .index_axis_move(Axis(0), 0),
    };
    let target = build_target(&labels, &kind)?;
    let (top, left) = match placement {
        Placement::At(t, l) => (t, l),
        Placement::Auto => {
            let class = kind
                .source_class()
                .ok_or_else(|| usage("automatic placement needs a class_switch or erase target"))?;
            auto_placement(&labels, class, ph, pw)?
        }
    };
    let cfg = AttackConfig {
        iterations: a.iters,
        step: a.step,
        momentum: a.momentum,
        eot: a.eot,
        max_jitter: a.jitter,
        noise_sigma: a.noise,
        smooth: a.smooth,
        seed: g.seed,
        workers: g.workers,
        ..AttackConfig::default()
    };
    let outcome = momentum_patch_attack(
        &net,
        &image,
        &target,
        &PatchSpec::gray(top, left, ph, pw),
        &cfg,
    )?;
    let effect = measure_effect(&net, &image, &outcome.rendered, &target)?;
    let influence = influence_region(&spec, &outcome.rendered.rect())?;
    let within_influence = effect
        .changed_mask
        .to_array()
        .indexed_iter()
        .all(|((y, x), &c)| !c || influence.is_some_and(|b| b.contains(y, x)));
    let metrics = AttackMetrics {
        arch: spec.name.clone(),
        patch_h: ph,
        patch_w: pw,
        patch_top: top,
        patch_left: left,
        changed_pixels: effect.changed_pixels as u64,
        agreement: effect.agreement,
        object_agreement: effect.object_agreement,
        best_loss: outcome.best_loss,
        initial_loss: outcome.trace[0],
        iterations: a.iters,
        seed: g.seed,
        within_influence,
    };

    let p = |suffix: &str| PathBuf::from(format!("{}_{suffix}", a.out_prefix));
    let patched = patchfeas::attack::apply_patch(
        &image,
        &outcome.rendered,
        &patchfeas::attack::PatchTransform::IDENTITY,
    )?;
    let changed = effect
        .changed_mask
        .to_array()
        .mapv(|c| if c { 255u8 } else { 0 });
    let files = [
        (p("patched.ppm"), rgb_to_pnm(&patched)),
        (p("patch.ppm"), rgb_to_pnm(&outcome.rendered.pixels)),
        (p("before.pgm"), gray_to_pnm(&effect.clean_argmax)),
        (p("after.pgm"), gray_to_pnm(&effect.attacked_argmax)),
        (p("changed.pgm"), gray_to_pnm(&changed)),
    ];
    let mut written = Vec::new();
    for (path, img) in &files {
        write_pnm(path, img)?;
        written.push(path.clone());
    }
    let metrics_path = p("metrics.json");
    std::fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&metrics)? + "\n",
    )?;
    let trace_path = p("trace.csv");
    let mut trace = String::from("iteration,loss\n");
    for (i, l) in outcome.trace.iter().enumerate() {
        trace.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(&trace_path, trace)?;
    written.extend([metrics_path, trace_path]);
    write_manifest(g, "attack", &p("manifest.json"), &written)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn expand(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for pat in patterns {
        let matched: Vec<PathBuf> = glob::glob(pat)
            .map_err(|e| usage(format!("bad pattern `{pat}`: {e}")))?
            .filter_map(|p| p.ok())
            .collect();
        if matched.is_empty() {
            return Err(CliError::Data(format!("no files match `{pat}`")));
        }
        paths.extend(matched);
    }
    paths.sort();
    paths.dedup();
    Ok(paths)
}

fn report(g: &Global, a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for path in expand(&a.feasibility)? {
        rows.extend(
            parse_feasibility_csv(&std::fs::read_to_string(&path)?)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
        );
    }
    let mut metrics = Vec::new();
    for path in expand(&a.metrics)? {
        metrics.extend(
            parse_metrics_json(&std::fs::read_to_string(&path)?)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
        );
    }
    emit(
        g,
        "report",
        a.out.as_deref(),
        &build_report(&rows, &metrics).to_csv(),
    )
}

fn verify(path: &Path) -> Result<()> {
    let manifest = Manifest::read(path)?;
    let bad = manifest.mismatches(Path::new("."));
    if bad.is_empty() {
        println!("ok: {} artifacts match", manifest.artifacts.len());
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "{} artifacts differ from the manifest: {}",
            bad.len(),
            bad.iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(", ")
        )))
    }
}
