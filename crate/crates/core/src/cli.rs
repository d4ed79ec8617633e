//! Command-line surface. Every subcommand reads a `key=value` file given by
//! `--config`, applies `--key value` overrides on top, and writes the fully
//! resolved config next to its artifacts.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{join_list, Config};
use crate::data::formats::{encode_correspondences, load_off_mesh, read_pcd, write_atomic, write_ppm};
use crate::data::{generate_dataset, load_dataset, write_dataset, DataConfig, Dataset, Split, CONFIG_ECHO_FILE, DATA_KEYS};
use crate::error::{Error, Result};
use crate::eval::{
    embed_split, knn_classify, label_fraction_sweep, linear_probe, mean_by_fraction, read_embeddings, stratified_subsample, write_embeddings,
    write_results, Protocol, ProbeConfig, SweepConfig,
};
use crate::geometry::{build_view_rig, farthest_point_sample, normalize_unit_cube, PointCloud, DEFAULT_RIG_RADIUS};
use crate::gradsuite::{gradient_suite, GRAD_TOL};
use crate::pipeline::augment::AUGMENT_KEYS;
use crate::pipeline::config::{MODEL_KEYS, TRAIN_KEYS};
use crate::pipeline::{
    pretrain_stage1, pretrain_stage2, resume_stage1, resume_stage2, write_loss_log, Checkpoint, Stage, StageOutput, TrainConfig,
};
use crate::renderer::{extract_correspondences, render_views, RenderStyle};

/// Overrides the default output directory when `--out` is absent.
pub const OUT_ENV: &str = "POINTVIEW_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const SUBCOMMANDS: [&str; 8] = ["gen-data", "render", "pretrain-2d", "pretrain-3d", "embed", "probe", "sweep", "gradcheck"];

pub const USAGE: &str = "\
usage: pointview <command> [--config PATH] [--key value ...] [--seed N] [--out DIR]

commands:
  gen-data      generate a procedural dataset (classes, per_class, points, views, width, height, style, ...)
  render        render one point cloud (.pcd) or mesh (.off) given by `input` from a view rig
  pretrain-2d   contrastive pre-training of the image encoder on `data`
  pretrain-3d   transfer into the point encoder from the stage-1 checkpoint `init`
  embed         point-encoder embeddings of every object in `data` using `checkpoint`
  probe         one linear or kNN probe on `embeddings` at label `fraction`
  sweep         probes over `fractions` x `seeds`
  gradcheck     finite-difference check of every differentiable op; exit 0 iff all pass

Keys may be written as `--per_class 8` or `--per-class=8`. The output
directory defaults to $POINTVIEW_OUT, then to `out/<command>`.
`pretrain-2d` and `pretrain-3d` also take `resume=PATH` to continue a checkpoint.

exit status: 0 success, 1 usage error, 2 runtime error
";

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

struct Invocation {
    command: String,
    config: Config,
    out: PathBuf,
}

/// Runs one command line (without the program name); returns the exit code.
pub fn run(args: &[String], stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let inv = match parse_args(args) {
        Ok(Some(inv)) => inv,
        Ok(None) => {
            let _ = stdout.write_all(USAGE.as_bytes());
            return EXIT_OK;
        }
        Err(msg) => {
            let _ = writeln!(stderr, "error: {msg}\n\n{USAGE}");
            return EXIT_USAGE;
        }
    };
    let result = match inv.command.as_str() {
        "gen-data" => gen_data(&inv, stdout, stderr),
        "render" => render(&inv, stdout),
        "pretrain-2d" => pretrain(&inv, Stage::One, stdout),
        "pretrain-3d" => pretrain(&inv, Stage::Two, stdout),
        "embed" => embed(&inv, stdout),
        "probe" => probe(&inv, stdout),
        "sweep" => sweep(&inv, stdout),
        "gradcheck" => gradcheck(&inv, stdout),
        _ => unreachable!("checked by parse_args"),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}\n\n{USAGE}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// `Ok(None)` means help was requested.
fn parse_args(args: &[String]) -> std::result::Result<Option<Invocation>, String> {
    let Some(first) = args.first() else { return Err("no command given".into()) };
    if first == "--help" || first == "-h" || first == "help" {
        return Ok(None);
    }
    if !SUBCOMMANDS.contains(&first.as_str()) {
        return Err(format!("unknown command {first:?}"));
    }
    let mut file: Option<PathBuf> = None;
    let mut out: Option<PathBuf> = None;
    let mut overrides = Config::default();
    let mut i = 1;
    while i < args.len() {
        let arg = &args[i];
        if arg == "--help" || arg == "-h" {
            return Ok(None);
        }
        let Some(flag) = arg.strip_prefix("--") else { return Err(format!("unexpected argument {arg:?}")) };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                i += 1;
                let v = args.get(i).ok_or_else(|| format!("flag --{flag} needs a value"))?;
                (flag.to_string(), v.clone())
            }
        };
        let key = key.replace('-', "_");
        match key.as_str() {
            "config" => file = Some(PathBuf::from(value)),
            "out" => out = Some(PathBuf::from(value)),
            _ if key.is_empty() => return Err(format!("malformed flag {arg:?}")),
            _ => overrides.set(key, value),
        }
        i += 1;
    }
    let command = first.clone();
    let mut config = match &file {
        Some(p) => Config::load(p).map_err(|e| format!("config file: {e}"))?,
        None => Config::default(),
    };
    config.merge(&overrides);
    let known = known_keys(&command);
    if let Some(k) = config.keys().find(|k| !known.contains(k)) {
        return Err(format!("unknown option {k:?} for {command}"));
    }
    let out = out
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| Path::new("out").join(&command));
    Ok(Some(Invocation { command, config, out }))
}

const RENDER_KEYS: &[&str] = &["input", "points", "surface_samples", "views", "width", "height", "style", "splat_radius", "rig_radius", "seed"];
const PROBE_KEYS: &[&str] = &["embeddings", "protocol", "probe_epochs", "probe_lr", "probe_weight_decay", "knn_k", "seed"];

fn known_keys(command: &str) -> Vec<&'static str> {
    let mut k: Vec<&'static str> = match command {
        "gen-data" => DATA_KEYS.to_vec(),
        "render" => RENDER_KEYS.to_vec(),
        "pretrain-2d" | "pretrain-3d" => {
            let mut k = vec!["data", "init", "resume"];
            k.extend_from_slice(TRAIN_KEYS);
            k.extend_from_slice(AUGMENT_KEYS);
            k.extend_from_slice(MODEL_KEYS);
            k
        }
        "embed" => vec!["data", "checkpoint"],
        "probe" => {
            let mut k = PROBE_KEYS.to_vec();
            k.push("fraction");
            k
        }
        "sweep" => {
            let mut k = PROBE_KEYS.to_vec();
            k.extend_from_slice(&["fractions", "seeds"]);
            k
        }
        _ => Vec::new(),
    };
    k.push("seed");
    k
}

fn required<'a>(c: &'a Config, key: &str, command: &str) -> std::result::Result<&'a str, Failure> {
    c.get(key).ok_or_else(|| Failure::Usage(format!("{command} needs --{key}")))
}

fn echo(out: &Path, c: &Config) -> Result<()> {
    write_atomic(&out.join(CONFIG_ECHO_FILE), c.to_text().as_bytes())
}

fn gen_data(inv: &Invocation, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Outcome {
    let cfg = DataConfig::from_config(&inv.config)?;
    let ds = generate_dataset(&cfg)?;
    for (id, why) in &ds.skipped {
        let _ = writeln!(stderr, "skipped object {id}: {why}");
    }
    let manifest = write_dataset(&ds, &inv.out)?;
    let _ = writeln!(stdout, "wrote {} objects, {} images to {}", manifest.objects.len(), ds.image_count(), inv.out.display());
    Ok(())
}

fn render(inv: &Invocation, stdout: &mut dyn Write) -> Outcome {
    let c = &inv.config;
    let input = PathBuf::from(required(c, "input", "render")?);
    let seed: u64 = c.get_or("seed", 0)?;
    let surface_samples: usize = c.get_or("surface_samples", 2048)?;
    let raw = match input.extension().and_then(|e| e.to_str()) {
        Some("off") => load_off_mesh(&input)?.sample_surface(surface_samples, &mut ChaCha8Rng::seed_from_u64(seed))?,
        Some("pcd") => read_pcd(&input)?,
        _ => return Err(Failure::Usage(format!("input {} must end in .off or .pcd", input.display()))),
    };
    let points: usize = c.get_or("points", raw.len().min(256))?;
    let cloud: PointCloud = farthest_point_sample(&normalize_unit_cube(&raw)?, points, seed)?;
    let views: usize = c.get_or("views", 6)?;
    let size: (usize, usize) = (c.get_or("width", 32)?, c.get_or("height", 32)?);
    let style: RenderStyle = c.get_or("style", RenderStyle::Rgb)?;
    let splat: usize = c.get_or("splat_radius", 1)?;
    let radius: f64 = c.get_or("rig_radius", DEFAULT_RIG_RADIUS)?;
    let rig = build_view_rig(views, radius, size)?;
    let (images, buffers) = render_views(&cloud, &rig, style, splat)?;
    let set = extract_correspondences(0, &cloud, &rig, &buffers)?;
    let mut matrices = String::new();
    for (j, (img, cam)) in images.iter().zip(&rig.cameras).enumerate() {
        write_ppm(&inv.out.join(format!("view{j:02}.ppm")), img)?;
        let m = cam.projection_matrix();
        let row: Vec<String> = (0..3).flat_map(|r| (0..4).map(move |k| (r, k))).map(|(r, k)| m[(r, k)].to_string()).collect();
        matrices.push_str(&row.join(","));
        matrices.push('\n');
    }
    write_atomic(&inv.out.join("correspondences.csv"), encode_correspondences(&set).as_bytes())?;
    write_atomic(&inv.out.join("matrices.csv"), matrices.as_bytes())?;
    let mut resolved = c.clone();
    resolved.set("points", points);
    resolved.set("surface_samples", surface_samples);
    resolved.set("views", views);
    resolved.set("width", size.0);
    resolved.set("height", size.1);
    resolved.set("style", style);
    resolved.set("splat_radius", splat);
    resolved.set("rig_radius", radius);
    resolved.set("seed", seed);
    echo(&inv.out, &resolved)?;
    let _ = writeln!(stdout, "rendered {views} views, {} correspondences to {}", set.len(), inv.out.display());
    Ok(())
}

fn load_data(c: &Config, command: &str) -> std::result::Result<(PathBuf, Dataset), Failure> {
    let dir = PathBuf::from(required(c, "data", command)?);
    let ds = load_dataset(&dir)?;
    Ok((dir, ds))
}

fn pretrain(inv: &Invocation, stage: Stage, stdout: &mut dyn Write) -> Outcome {
    let command = inv.command.as_str();
    let (data_dir, ds) = load_data(&inv.config, command)?;
    let mut train_keys = inv.config.clone();
    for k in ["data", "init", "resume"] {
        train_keys.remove(k);
    }
    if stage == Stage::One {
        // the image encoder follows the dataset unless told otherwise
        if !train_keys.contains("image_width") {
            train_keys.set("image_width", ds.config.width);
        }
        if !train_keys.contains("image_height") {
            train_keys.set("image_height", ds.config.height);
        }
    }
    let resume = inv.config.get("resume").map(PathBuf::from);
    let init = inv.config.get("init").map(PathBuf::from);
    let mut observer = |_: usize, _: &crate::pipeline::Model| Ok(());
    let (out, resolved): (StageOutput, TrainConfig) = match (stage, resume) {
        (_, Some(path)) => {
            let mut ckpt = Checkpoint::load(&path)?;
            if ckpt.stage != stage {
                return Err(Failure::Usage(format!("{} is not a stage-{} checkpoint", path.display(), stage.number())));
            }
            let epochs = train_keys.get_or("epochs", ckpt.config.epochs)?;
            ckpt.config.epochs = epochs;
            let cfg = ckpt.config.clone();
            let out = match stage {
                Stage::One => resume_stage1(&ds, ckpt, epochs)?,
                Stage::Two => resume_stage2(&ds, ckpt, epochs, &mut observer)?,
            };
            (out, cfg)
        }
        (Stage::One, None) => {
            let cfg = TrainConfig::from_config(&train_keys, Stage::One)?;
            (pretrain_stage1(&ds, &cfg)?, cfg)
        }
        (Stage::Two, None) => {
            let Some(path) = init else { return Err(Failure::Usage("pretrain-3d needs --init (a stage-1 checkpoint) or --resume".into())) };
            let s1 = Checkpoint::load(&path)?;
            // the model shape comes from the stage-1 checkpoint
            let mut keys = Config::default();
            s1.config.model.write_config(&mut keys);
            keys.merge(&train_keys);
            let cfg = TrainConfig::from_config(&keys, Stage::Two)?;
            (pretrain_stage2(&ds, &s1, &cfg)?, cfg)
        }
    };
    let ckpt_path = inv.out.join("checkpoint.pvssl");
    out.checkpoint.save(&ckpt_path)?;
    write_loss_log(&inv.out.join("loss_log.csv"), &out.log)?;
    let mut echoed = resolved.to_config();
    echoed.set("data", data_dir.display());
    for k in ["init", "resume"] {
        if let Some(v) = inv.config.get(k) {
            echoed.set(k, v);
        }
    }
    echo(&inv.out, &echoed)?;
    let last = out.log.last().map_or(f64::NAN, |r| r.total);
    let _ = writeln!(stdout, "stage {} finished at epoch {}, last loss {last}; checkpoint {}", stage.number(), out.checkpoint.epoch, ckpt_path.display());
    Ok(())
}

fn embed(inv: &Invocation, stdout: &mut dyn Write) -> Outcome {
    let (data_dir, ds) = load_data(&inv.config, "embed")?;
    let ckpt_path = PathBuf::from(required(&inv.config, "checkpoint", "embed")?);
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let f3d = &ckpt.model.f3d;
    let train = embed_split(f3d, &ds, Split::Train)?;
    let test = embed_split(f3d, &ds, Split::Test)?;
    write_embeddings(&inv.out.join("embeddings.csv"), &train, &test)?;
    let mut echoed = Config::default();
    echoed.set("data", data_dir.display());
    echoed.set("checkpoint", ckpt_path.display());
    echo(&inv.out, &echoed)?;
    let _ = writeln!(stdout, "embedded {} train and {} test objects in {} dimensions", train.len(), test.len(), train.dim());
    Ok(())
}

fn probe_settings(c: &Config) -> Result<(Protocol, SweepConfig, Config)> {
    let d = SweepConfig::default();
    let protocol: Protocol = c.get_or("protocol", Protocol::Linear)?;
    let cfg = SweepConfig {
        probe: ProbeConfig {
            epochs: c.get_or("probe_epochs", d.probe.epochs)?,
            lr: c.get_or("probe_lr", d.probe.lr)?,
            weight_decay: c.get_or("probe_weight_decay", d.probe.weight_decay)?,
        },
        knn_k: c.get_or("knn_k", d.knn_k)?,
    };
    let mut echoed = Config::default();
    echoed.set("protocol", protocol);
    echoed.set("probe_epochs", cfg.probe.epochs);
    echoed.set("probe_lr", cfg.probe.lr);
    echoed.set("probe_weight_decay", cfg.probe.weight_decay);
    echoed.set("knn_k", cfg.knn_k);
    if let Some(e) = c.get("embeddings") {
        echoed.set("embeddings", e);
    }
    Ok((protocol, cfg, echoed))
}

fn probe(inv: &Invocation, stdout: &mut dyn Write) -> Outcome {
    let c = &inv.config;
    let (train, test) = read_embeddings(Path::new(required(c, "embeddings", "probe")?))?;
    let (protocol, cfg, mut echoed) = probe_settings(c)?;
    let fraction: f64 = c.get_or("fraction", 1.0)?;
    let seed: u64 = c.get_or("seed", 0)?;
    let sub = train.subset(&stratified_subsample(&train.labels, fraction, seed)?);
    let mut r = match protocol {
        Protocol::Linear => linear_probe(&sub, &test, cfg.probe, seed)?,
        Protocol::Knn => knn_classify(&sub, &test, cfg.knn_k.min(sub.len()))?,
    };
    r.fraction = fraction;
    r.seed = seed;
    write_results(&inv.out.join("results.csv"), std::slice::from_ref(&r))?;
    echoed.set("fraction", fraction);
    echoed.set("seed", seed);
    echo(&inv.out, &echoed)?;
    let _ = writeln!(stdout, "{protocol} probe at fraction {fraction}: accuracy {:.4} ({}/{})", r.accuracy, r.correct, r.total);
    Ok(())
}

fn sweep(inv: &Invocation, stdout: &mut dyn Write) -> Outcome {
    let c = &inv.config;
    let (train, test) = read_embeddings(Path::new(required(c, "embeddings", "sweep")?))?;
    let (protocol, cfg, mut echoed) = probe_settings(c)?;
    let fractions: Vec<f64> = c.get_list("fractions", vec![0.1, 0.2, 1.0])?;
    let seeds: Vec<u64> = match (c.get("seeds"), c.get("seed")) {
        (Some(_), _) | (None, None) => c.get_list("seeds", vec![0, 1, 2])?,
        (None, Some(s)) => vec![s.parse().map_err(|_| Error::contract(format!("seed {s:?} is not an integer")))?],
    };
    let results = label_fraction_sweep(&train, &test, &fractions, &seeds, protocol, cfg)?;
    write_results(&inv.out.join("results.csv"), &results)?;
    let means = mean_by_fraction(&results);
    let rows: Vec<Vec<String>> = means.iter().map(|(f, a)| vec![f.to_string(), format!("{a:.4}")]).collect();
    crate::data::formats::write_metrics(&inv.out.join("summary.csv"), &["fraction", "mean_accuracy"], &rows)?;
    echoed.set("fractions", join_list(&fractions));
    echoed.set("seeds", join_list(&seeds));
    echo(&inv.out, &echoed)?;
    for (f, a) in means {
        let _ = writeln!(stdout, "{protocol} fraction {f}: mean accuracy {a:.4}");
    }
    Ok(())
}

fn gradcheck(inv: &Invocation, stdout: &mut dyn Write) -> Outcome {
    let cases = gradient_suite()?;
    let rows: Vec<Vec<String>> = cases.iter().map(|c| vec![c.name.to_string(), format!("{:e}", c.error), c.passed().to_string()]).collect();
    crate::data::formats::write_metrics(&inv.out.join("gradcheck.csv"), &["case", "max_rel_error", "passed"], &rows)?;
    let mut echoed = Config::default();
    echoed.set("tolerance", GRAD_TOL);
    echoed.set("eps", crate::gradsuite::GRAD_EPS);
    echo(&inv.out, &echoed)?;
    for c in &cases {
        let _ = writeln!(stdout, "{} {:<20} {:.3e}", if c.passed() { "PASS" } else { "FAIL" }, c.name, c.error);
    }
    let failed = cases.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(Failure::Runtime(Error::Numeric(format!("{failed} of {} gradient checks exceed {GRAD_TOL:e}", cases.len()))));
    }
    let _ = writeln!(stdout, "all {} gradient checks within {GRAD_TOL:e}", cases.len());
    Ok(())
}
