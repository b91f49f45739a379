//! Command-line front end: builds compressed operators, runs the banded
//! product, benchmarks its cost, generates datasets, and trains/evaluates
//! the multiresolution networks. Every run prints its resolved
//! configuration as a JSON line first; series go to stdout as CSV, scalar
//! summaries as JSON. Exit codes: 0 ok, 2 validation failure, 3 I/O or
//! integrity error.

mod args;

use args::Flags;
use bcr_core::apps::{make_dataset, Dataset, TaskKind};
use bcr_core::bcrnet::{
    build_linear_net, param_count, Mode, NetConfig, TransformInit,
};
use bcr_core::grad::{fit_model, TrainedModel, TrainSchedule};
use bcr_core::layers::Activation;
use bcr_core::nsform::{
    apply, apply_instrumented, decay_profile, decompose_operator, full_band, project_kernel,
    DenseMatrix, KernelSpec, NsformError,
};
use bcr_core::persist::{
    load_checkpoint, load_dataset, load_nsform, read_tensor, save_checkpoint, save_dataset,
    save_nsform, write_tensor, PersistError,
};
use bcr_core::rng::Stream;
use bcr_core::wavelet::make_filters;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Validation failures exit 2, I/O and integrity failures exit 3.
enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Io(m) => m,
        }
    }
}

impl From<args::FlagError> for CliError {
    fn from(e: args::FlagError) -> Self {
        CliError::Validation(e.0)
    }
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        CliError::Io(e.to_string())
    }
}

macro_rules! from_validation {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Validation(e.to_string())
            }
        }
    )*};
}

from_validation!(
    bcr_core::wavelet::WaveletError,
    bcr_core::nsform::NsformError,
    bcr_core::bcrnet::NetError,
    bcr_core::grad::GradError,
    bcr_core::apps::AppsError,
    bcr_core::layers::LayerError
);

const USAGE: &str = "usage: bcr <command> [--flag value ...]

commands:
  filters  --p P
  compress --input A.bcrt --p P --l0 L0 --nb NB|full --out ns.bcrt [--dim D] [--seed K]
  apply    --ns ns.bcrt --vec v.bcrt --out u.bcrt [--compare-dense A.bcrt]
  bench    --kernel identity|invdist --lmin L --lmax L --nb NB [--p P] [--l0 L0] [--seed K]
  decay    --kernel invdist --l L --p P [--l0 L0]
  gen      --task green1d|green2d|smoke --n N --coarse M --train T --test S
           [--seed K] [--threads T] --out data.bcrt
  train    --data data.bcrt [--alpha A] [--k K] [--nb NB] [--p P] [--l0 L0]
           [--mode lc|conv] [--activation relu|sigmoid|id] [--epochs E] [--lr R]
           [--lr-decay D] [--batch B] [--max-steps S] [--seed K] [--repeats R]
           [--normalize on|off] [--transform-init wavelet|random]
           [--transform-trainable on|off] [--threads T] --out model.bcrt
  eval     --model model.bcrt --data data.bcrt [--threads T]
  lintest  --n N --p P --nb NB|full [--dim D] [--l0 L0] [--seed K]
";

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    if argv.is_empty() || argv[0] == "--help" || argv[0] == "-h" || argv[0] == "help" {
        print!("{USAGE}");
        std::process::exit(if argv.is_empty() { 2 } else { 0 });
    }
    let cmd = argv[0].clone();
    let flags = match Flags::parse(&argv[1..]) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    };
    match run(&cmd, &flags) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.code());
        }
    }
}

fn run(cmd: &str, flags: &Flags) -> Result<(), CliError> {
    match cmd {
        "filters" => cmd_filters(flags),
        "compress" => cmd_compress(flags),
        "apply" => cmd_apply(flags),
        "bench" => cmd_bench(flags),
        "decay" => cmd_decay(flags),
        "gen" => cmd_gen(flags),
        "train" => cmd_train(flags),
        "eval" => cmd_eval(flags),
        "lintest" => cmd_lintest(flags),
        other => Err(CliError::Validation(format!("unknown command '{other}'\n{USAGE}"))),
    }
}

/// --seed flag, BCR_SEED env, or 0.
fn resolve_seed(flags: &Flags) -> Result<u64, CliError> {
    if let Some(v) = flags.str_opt("seed") {
        return v
            .parse()
            .map_err(|_| CliError::Validation(format!("flag --seed: bad integer '{v}'")));
    }
    if let Ok(v) = std::env::var("BCR_SEED") {
        return v
            .parse()
            .map_err(|_| CliError::Validation(format!("BCR_SEED: bad integer '{v}'")));
    }
    Ok(0)
}

fn parse_band(value: &str, finest: usize) -> Result<usize, CliError> {
    if value == "full" {
        Ok(full_band(finest))
    } else {
        value
            .parse()
            .map_err(|_| CliError::Validation(format!("flag --nb: bad value '{value}'")))
    }
}

fn level_of(points: usize, what: &str) -> Result<usize, CliError> {
    if points == 0 || !points.is_power_of_two() {
        return Err(CliError::Validation(format!("{what} {points} is not a power of two")));
    }
    Ok(points.trailing_zeros() as usize)
}

fn default_coarse_level(flags: &Flags, p: usize) -> Result<usize, CliError> {
    let filters = make_filters(p)?;
    flags.usize_or("l0", filters.min_coarse_level()).map_err(Into::into)
}

fn load_matrix(path: &Path, dim: usize) -> Result<DenseMatrix, CliError> {
    let (extents, data) = read_tensor(path)?;
    if extents.len() != 2 || extents[0] != extents[1] {
        return Err(CliError::Validation(format!(
            "{}: expected a square rank-2 tensor, got extents {extents:?}",
            path.display()
        )));
    }
    let side = extents[0] as usize;
    let grid_level = match dim {
        1 => level_of(side, "matrix side")?,
        _ => level_of(side, "matrix side")? / 2,
    };
    if 1usize << (dim * grid_level) != side {
        return Err(CliError::Validation(format!(
            "matrix side {side} is not a power of {} for dim {dim}",
            1 << dim
        )));
    }
    DenseMatrix::new(dim, grid_level, data).map_err(Into::into)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    bcr_core::apps::relative_l2(a, b)
}

fn cmd_filters(flags: &Flags) -> Result<(), CliError> {
    let p = flags.usize_required("p")?;
    println!("{}", json!({"command": "filters", "p": p}));
    let f = make_filters(p)?;
    let r = f.residuals();
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "p": p,
            "lowpass": f.lowpass(),
            "highpass": f.highpass(),
            "highpass_offset": f.highpass_offset(),
            "residuals": {
                "norm": r.norm,
                "shift_orthogonality": r.shift_orthogonality,
                "sum_sqrt2": r.sum_sqrt2,
                "moment_max": r.moment_max,
            }
        }))
        .expect("json"),
    );
    Ok(())
}

fn cmd_compress(flags: &Flags) -> Result<(), CliError> {
    let input = PathBuf::from(flags.str_required("input")?);
    let out = PathBuf::from(flags.str_required("out")?);
    let p = flags.usize_required("p")?;
    let dim = flags.usize_or("dim", 1)?;
    let a = load_matrix(&input, dim)?;
    let l0 = flags.usize_or("l0", {
        let filters = make_filters(p)?;
        filters.min_coarse_level()
    })?;
    let nb_raw = flags.str_required("nb")?;
    let n_b = parse_band(&nb_raw, a.level)?;
    let seed = resolve_seed(flags)?;
    println!(
        "{}",
        json!({
            "command": "compress", "input": input.display().to_string(),
            "out": out.display().to_string(), "dim": dim, "level": a.level,
            "p": p, "l0": l0, "nb": n_b, "seed": seed,
        })
    );
    let filters = make_filters(p)?;
    let ns = decompose_operator(&a, &filters, l0, n_b)?;
    save_nsform(&out, &ns)?;
    println!("# per-level band energies");
    println!("level,block,energy");
    for lv in ns.levels() {
        for (j, b) in lv.blocks.iter().enumerate() {
            let energy: f64 = b.data().iter().map(|x| x * x).sum();
            println!("{},{},{:.17e}", lv.level, j + 1, energy);
        }
    }
    println!("# truncation error against the dense product, random probes");
    println!("probe,relative_error");
    let mut rng = Stream::new(seed);
    for probe in 0..20 {
        let v = rng.normal_vec(ns.size());
        let u = apply(&ns, &v)?;
        let want = a.matvec(&v);
        println!("{},{:.17e}", probe, rel_err(&u, &want));
    }
    Ok(())
}

fn cmd_apply(flags: &Flags) -> Result<(), CliError> {
    let ns_path = PathBuf::from(flags.str_required("ns")?);
    let vec_path = PathBuf::from(flags.str_required("vec")?);
    let out_path = PathBuf::from(flags.str_required("out")?);
    println!(
        "{}",
        json!({
            "command": "apply", "ns": ns_path.display().to_string(),
            "vec": vec_path.display().to_string(), "out": out_path.display().to_string(),
        })
    );
    let ns = load_nsform(&ns_path)?;
    let (extents, v) = read_tensor(&vec_path)?;
    if v.len() != ns.size() {
        return Err(CliError::Validation(format!(
            "vector has {} values (extents {extents:?}) but the operator expects {}",
            v.len(),
            ns.size()
        )));
    }
    let u = apply(&ns, &v)?;
    write_tensor(&out_path, &[u.len() as u64], &u)?;
    if let Some(dense_path) = flags.str_opt("compare-dense") {
        let a = load_matrix(Path::new(dense_path), ns.dim())?;
        if a.side != ns.size() {
            return Err(CliError::Validation(format!(
                "dense matrix side {} does not match operator size {}",
                a.side,
                ns.size()
            )));
        }
        let want = a.matvec(&v);
        println!("{}", json!({"relative_error_vs_dense": rel_err(&u, &want)}));
    }
    Ok(())
}

fn make_kernel(name: &str, dim: usize, level: usize) -> Result<KernelSpec, CliError> {
    match name {
        "identity" => Ok(KernelSpec::identity(dim, level)),
        "invdist" => Ok(KernelSpec::inv_dist(dim)),
        other => Err(CliError::Validation(format!("unknown kernel '{other}'"))),
    }
}

fn cmd_bench(flags: &Flags) -> Result<(), CliError> {
    let kernel = flags.str_or("kernel", "invdist");
    let lmin = flags.usize_or("lmin", 7)?;
    let lmax = flags.usize_or("lmax", 12)?;
    let p = flags.usize_or("p", 3)?;
    let n_b = flags.usize_required("nb")?;
    let l0 = default_coarse_level(flags, p)?;
    let seed = resolve_seed(flags)?;
    println!(
        "{}",
        json!({
            "command": "bench", "kernel": kernel, "lmin": lmin, "lmax": lmax,
            "p": p, "l0": l0, "nb": n_b, "seed": seed,
        })
    );
    if lmin > lmax {
        return Err(CliError::Validation(format!("lmin {lmin} exceeds lmax {lmax}")));
    }
    let filters = make_filters(p)?;
    println!("l,n,flops,wall_seconds");
    let mut flops_seen = Vec::new();
    let mut rng = Stream::new(seed);
    for l in lmin..=lmax {
        let spec = make_kernel(&kernel, 1, l)?;
        let a = project_kernel(&spec, l)?;
        let ns = decompose_operator(&a, &filters, l0, n_b)?;
        let v = rng.normal_vec(ns.size());
        // warm up once, then time enough repetitions to fill ~20ms
        let (_, flops) = apply_instrumented(&ns, &v)?;
        let mut reps = 1u32;
        let wall = loop {
            let start = Instant::now();
            for _ in 0..reps {
                let _ = apply(&ns, &v)?;
            }
            let elapsed = start.elapsed().as_secs_f64();
            if elapsed > 0.02 || reps >= 1 << 20 {
                break elapsed / reps as f64;
            }
            reps *= 4;
        };
        println!("{l},{},{flops},{wall:.3e}", ns.size());
        flops_seen.push(flops);
    }
    for pair in flops_seen.windows(2) {
        let ratio = pair[1] as f64 / pair[0] as f64;
        if ratio > 2.3 {
            return Err(CliError::Validation(format!(
                "flop ratio {ratio:.3} between consecutive levels exceeds 2.3"
            )));
        }
    }
    Ok(())
}

fn cmd_decay(flags: &Flags) -> Result<(), CliError> {
    let kernel = flags.str_or("kernel", "invdist");
    let l = flags.usize_required("l")?;
    let p = flags.usize_required("p")?;
    let l0 = default_coarse_level(flags, p)?;
    println!(
        "{}",
        json!({"command": "decay", "kernel": kernel, "l": l, "p": p, "l0": l0})
    );
    let filters = make_filters(p)?;
    let spec = make_kernel(&kernel, 1, l)?;
    let a = project_kernel(&spec, l)?;
    let ns = decompose_operator(&a, &filters, l0, full_band(l))?;
    println!("level,offset,max_abs");
    for (level, profile) in decay_profile(&ns) {
        for (offset, value) in profile.iter().enumerate() {
            println!("{level},{offset},{value:.17e}");
        }
    }
    Ok(())
}

fn cmd_gen(flags: &Flags) -> Result<(), CliError> {
    let task = TaskKind::parse(&flags.str_required("task")?)?;
    let n = flags.usize_required("n")?;
    let coarse = flags.usize_required("coarse")?;
    let n_train = flags.usize_required("train")?;
    let n_test = flags.usize_required("test")?;
    let seed = resolve_seed(flags)?;
    let threads = flags.usize_or("threads", 1)?;
    let out = PathBuf::from(flags.str_required("out")?);
    println!(
        "{}",
        json!({
            "command": "gen", "task": task.name(), "n": n, "coarse": coarse,
            "train": n_train, "test": n_test, "seed": seed, "threads": threads,
            "out": out.display().to_string(),
        })
    );
    level_of(n, "grid")?;
    let ds = make_dataset(task, n, coarse, n_train, n_test, seed, threads)?;
    save_dataset(&out, &ds)?;
    println!("{}", json!({"written": out.display().to_string(), "train": n_train, "test": n_test}));
    Ok(())
}

fn net_config_from_flags(flags: &Flags, ds: &Dataset) -> Result<NetConfig, CliError> {
    let p = flags.usize_or("p", 3)?;
    let finest = level_of(ds.grid, "dataset grid")?;
    let cfg = NetConfig {
        dim: ds.dim(),
        order: p,
        finest,
        coarsest: default_coarse_level(flags, p)?,
        band_width: flags.usize_or("nb", 3)?,
        channels: flags.usize_or("alpha", 2)?,
        depth: flags.usize_or("k", 5)?,
        mode: match flags.str_or("mode", "conv").as_str() {
            "lc" => Mode::Lc,
            "conv" => Mode::ConvEquivariant,
            other => return Err(CliError::Validation(format!("unknown mode '{other}'"))),
        },
        activation: match flags.str_or("activation", "relu").as_str() {
            "relu" => Activation::Relu,
            "sigmoid" => Activation::Sigmoid,
            "id" => Activation::Id,
            other => return Err(CliError::Validation(format!("unknown activation '{other}'"))),
        },
        transform_init: match flags.str_or("transform-init", "wavelet").as_str() {
            "wavelet" => TransformInit::Wavelet,
            "random" => TransformInit::Random,
            other => return Err(CliError::Validation(format!("unknown transform init '{other}'"))),
        },
        transform_trainable: flags.bool_or("transform-trainable", true)?,
    };
    Ok(cfg)
}

fn cmd_train(flags: &Flags) -> Result<(), CliError> {
    let data_path = PathBuf::from(flags.str_required("data")?);
    let out = PathBuf::from(flags.str_required("out")?);
    let ds = load_dataset(&data_path)?;
    let cfg = net_config_from_flags(flags, &ds)?;
    let epochs = flags.usize_or("epochs", 100)?;
    let lr = flags.f64_or("lr", 1e-3)?;
    let lr_decay = flags.f64_or("lr-decay", 1.0)?;
    let seed = resolve_seed(flags)?;
    let repeats = flags.usize_or("repeats", 1)?.max(1);
    let normalize = flags.bool_or("normalize", true)?;
    let batch = flags.str_opt("batch").map(|v| v.parse::<usize>()).transpose().map_err(|_| {
        CliError::Validation("flag --batch: bad integer".into())
    })?;
    let max_steps = flags
        .str_opt("max-steps")
        .map(|v| v.parse::<usize>())
        .transpose()
        .map_err(|_| CliError::Validation("flag --max-steps: bad integer".into()))?;
    let (weights, biases) = param_count(&cfg);
    println!(
        "{}",
        json!({
            "command": "train", "data": data_path.display().to_string(),
            "out": out.display().to_string(), "task": ds.task.name(),
            "grid": ds.grid, "dim": ds.dim(),
            "p": cfg.order, "l": cfg.finest, "l0": cfg.coarsest, "nb": cfg.band_width,
            "alpha": cfg.channels, "k": cfg.depth, "mode": cfg.mode.name(),
            "activation": cfg.activation.name(),
            "transform_init": cfg.transform_init.name(),
            "transform_trainable": cfg.transform_trainable,
            "epochs": epochs, "lr": lr, "lr_decay": lr_decay, "batch": batch,
            "max_steps": max_steps, "seed": seed, "repeats": repeats,
            "normalize": normalize, "weights": weights, "biases": biases,
        })
    );
    let schedule = TrainSchedule {
        batch_size: batch,
        lr_decay,
        max_steps,
        ..TrainSchedule::new(epochs, lr)
    };
    let mut best: Option<(f64, TrainedModel)> = None;
    let mut finals = Vec::new();
    println!("epoch,train_eps,test_eps,loss,wall_time_s");
    for r in 0..repeats {
        let run_seed = seed.wrapping_add(r as u64);
        if repeats > 1 {
            println!("# repeat {r} (seed {run_seed})");
        }
        let (model, history) =
            fit_model(&cfg, &ds.train, &ds.test, &schedule, run_seed, normalize)?;
        for m in &history {
            println!(
                "{},{:.8e},{:.8e},{:.8e},{:.3}",
                m.epoch, m.train_eps, m.test_eps, m.loss, m.wall_time_s
            );
        }
        let final_eps = history.last().map(|m| m.test_eps).unwrap_or(f64::NAN);
        finals.push(final_eps);
        if best.as_ref().map_or(true, |(e, _)| final_eps < *e) {
            best = Some((final_eps, model));
        }
    }
    let (_, model) = best.expect("at least one repeat");
    save_checkpoint(&out, &model)?;
    let mean = finals.iter().sum::<f64>() / finals.len() as f64;
    let min = finals.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = finals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "{}",
        json!({
            "repeats": repeats, "test_eps_mean": mean, "test_eps_min": min,
            "test_eps_max": max, "test_eps_spread": max - min,
            "model": out.display().to_string(),
        })
    );
    Ok(())
}

fn mean_error_threaded(
    model: &TrainedModel,
    samples: &[bcr_core::apps::TaskSample],
    threads: usize,
) -> Result<f64, CliError> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let threads = threads.max(1).min(samples.len());
    if threads == 1 {
        return Ok(model.mean_error(samples)?);
    }
    let chunk = samples.len().div_ceil(threads);
    let partials: Vec<Result<f64, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(move || Ok(model.mean_error(part)? * part.len() as f64)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut total = 0.0;
    for p in partials {
        total += p?;
    }
    Ok(total / samples.len() as f64)
}

fn cmd_eval(flags: &Flags) -> Result<(), CliError> {
    let model_path = PathBuf::from(flags.str_required("model")?);
    let data_path = PathBuf::from(flags.str_required("data")?);
    let threads = flags.usize_or("threads", 1)?;
    println!(
        "{}",
        json!({
            "command": "eval", "model": model_path.display().to_string(),
            "data": data_path.display().to_string(), "threads": threads,
        })
    );
    let model = load_checkpoint(&model_path)?;
    let ds = load_dataset(&data_path)?;
    let eps_train = mean_error_threaded(&model, &ds.train, threads)?;
    let eps_test = mean_error_threaded(&model, &ds.test, threads)?;
    println!("{}", json!({"eps_train": eps_train, "eps_test": eps_test}));
    Ok(())
}

fn cmd_lintest(flags: &Flags) -> Result<(), CliError> {
    let n = flags.usize_required("n")?;
    let p = flags.usize_required("p")?;
    let dim = flags.usize_or("dim", 1)?;
    let level = level_of(n, "grid")?;
    let nb_raw = flags.str_required("nb")?;
    let n_b = parse_band(&nb_raw, level)?;
    let l0 = default_coarse_level(flags, p)?;
    let seed = resolve_seed(flags)?;
    println!(
        "{}",
        json!({
            "command": "lintest", "n": n, "dim": dim, "level": level,
            "p": p, "l0": l0, "nb": n_b, "seed": seed,
        })
    );
    let mut rng = Stream::new(seed);
    let side = 1usize << (dim * level);
    let a = DenseMatrix::new(dim, level, rng.normal_vec(side * side))
        .map_err(|e: NsformError| CliError::Validation(e.to_string()))?;
    let filters = make_filters(p)?;
    let ns = decompose_operator(&a, &filters, l0, n_b)?;
    let net = build_linear_net(&ns)?;
    let is_full = n_b >= full_band(level);
    let mut max_vs_apply: f64 = 0.0;
    let mut max_vs_dense: f64 = 0.0;
    for _ in 0..20 {
        let v = rng.normal_vec(side);
        let out = net.evaluate(&v)?;
        let banded = apply(&ns, &v)?;
        max_vs_apply = max_vs_apply.max(rel_err(&out, &banded));
        if is_full {
            max_vs_dense = max_vs_dense.max(rel_err(&out, &a.matvec(&v)));
        }
    }
    let mut summary = json!({"max_deviation_vs_banded_apply": max_vs_apply});
    if is_full {
        summary["max_deviation_vs_dense"] = json!(max_vs_dense);
    }
    println!("{summary}");
    if max_vs_apply > 1e-12 {
        return Err(CliError::Validation(format!(
            "network deviates from the banded product by {max_vs_apply:.3e} (tolerance 1e-12)"
        )));
    }
    if is_full && max_vs_dense > 1e-10 {
        return Err(CliError::Validation(format!(
            "network deviates from the dense product by {max_vs_dense:.3e} (tolerance 1e-10)"
        )));
    }
    Ok(())
}
