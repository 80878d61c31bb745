//! Subcommands and their flag definitions.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use pvic::dataset::{load_dataset, load_split, load_split_file, load_table, Sample};
use pvic::datasyn::emit_dataset;
use pvic::decoder::PeMode;
use pvic::diagnostics::{decoder_gradcheck, op_gradchecks};
use pvic::eval::{hico_map, read_gt, read_results, vcoco_role_aps, write_results, HicoSetting};
use pvic::fsutil::{write_all_atomic, write_atomic};
use pvic::model::Model;
use pvic::numcore::ParamStore;
use pvic::objective::ActionTable;
use pvic::trainer::{infer, load_model, run_ablation, write_metrics, Suite, Trainer};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::probe::mask_probe;
use crate::viz::{attention_images, record_attention};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

pub fn cli() -> Command {
    let mut root = Command::new("pvic")
        .about("Pair-query cross-attention decoder for human-object interaction detection")
        .subcommand_required(true)
        .arg(Arg::new("config").long("config").global(true).value_name("PATH").help("Run configuration file"));
    for (section, key) in RunConfig::keys() {
        root = root.arg(
            Arg::new(key)
                .long(flag(key))
                .global(true)
                .value_name("VALUE")
                .help(format!("Override `{key}` in [{section}]"))
                .hide_short_help(true),
        );
    }
    let split = || Arg::new("split").long("split").default_value("test").help("Dataset split");
    let image = || Arg::new("image-id").long("image-id").required(true).help("Image to inspect");
    let pair = || Arg::new("pair").long("pair").required(true).value_parser(clap::value_parser!(usize)).help("Pair index within the image");
    root.subcommand(Command::new("synth").about("Generate the synthetic benchmark into the data directory"))
        .subcommand(
            Command::new("train")
                .about("Train a model, checkpointing after every epoch")
                .arg(Arg::new("resume").long("resume").action(ArgAction::SetTrue).help("Continue from the checkpoint")),
        )
        .subcommand(Command::new("infer").about("Score every pair of a split and write results").arg(split()))
        .subcommand(
            Command::new("eval")
                .about("Evaluate a results file")
                .arg(Arg::new("protocol").long("protocol").default_value("hico").value_parser(["hico", "vcoco"]))
                .arg(Arg::new("setting").long("setting").default_value("default").value_parser(["default", "known-objects"]))
                .arg(Arg::new("scenario").long("scenario").default_value("1").value_parser(clap::value_parser!(u8)))
                .arg(Arg::new("output").long("output").value_name("PATH").help("Also write the metrics here"))
                .arg(split()),
        )
        .subcommand(
            Command::new("attn-viz")
                .about("Write attention-term heatmaps for one pair")
                .arg(image())
                .arg(pair())
                .arg(Arg::new("layer").long("layer").value_parser(clap::value_parser!(usize)).help("Default: every layer"))
                .arg(Arg::new("head").long("head").value_parser(clap::value_parser!(usize)).help("Default: every head"))
                .arg(Arg::new("out-dir").long("out-dir").required(true))
                .arg(split()),
        )
        .subcommand(
            Command::new("mask-probe")
                .about("Zero the most attended cells and rescore a pair")
                .arg(image())
                .arg(pair())
                .arg(Arg::new("fraction").long("fraction").default_value("0.05").value_parser(clap::value_parser!(f64)))
                .arg(split()),
        )
        .subcommand(Command::new("gradcheck").about("Finite-difference checks of every operation and the decoder"))
        .subcommand(
            Command::new("ablate")
                .about("Train and evaluate every variant of an ablation suite")
                .arg(Arg::new("suite").long("suite").default_value("table2").value_parser(["table2", "table4"]))
                .arg(Arg::new("seeds").long("seeds").default_value("0,1,2")),
        )
}

/// Resolves the configuration: file, then `PVIC_SEED`, then flags.
pub fn resolve_config(m: &ArgMatches, env_seed: Option<String>) -> Result<RunConfig, CliError> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{path}: {e}")))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.apply_env_seed(env_seed)?;
    for (section, key) in RunConfig::keys() {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(section, key, v)?;
        }
    }
    cfg.finalize()?;
    Ok(cfg)
}

/// Parses `args` and runs the subcommand, writing reports to `out`.
pub fn run<I, T>(args: I, env_seed: Option<String>, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            write!(out, "{}", e.render())?;
            return Ok(());
        }
        Err(e) => {
            let text = e.render().to_string();
            return Err(CliError::Config(text.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ").to_string()));
        }
    };
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let cfg = resolve_config(sub, env_seed)?;
    match name {
        "synth" => cmd_synth(&cfg, out),
        "train" => cmd_train(&cfg, sub.get_flag("resume"), out),
        "infer" => cmd_infer(&cfg, str_arg(sub, "split"), out),
        "eval" => cmd_eval(
            &cfg,
            str_arg(sub, "protocol"),
            str_arg(sub, "setting"),
            *sub.get_one::<u8>("scenario").expect("default"),
            str_arg(sub, "split"),
            sub.get_one::<String>("output").map(PathBuf::from),
            out,
        ),
        "attn-viz" => cmd_attn_viz(
            &cfg,
            str_arg(sub, "split"),
            str_arg(sub, "image-id"),
            *sub.get_one::<usize>("pair").expect("required"),
            sub.get_one::<usize>("layer").copied(),
            sub.get_one::<usize>("head").copied(),
            Path::new(str_arg(sub, "out-dir")),
            out,
        ),
        "mask-probe" => cmd_mask_probe(
            &cfg,
            str_arg(sub, "split"),
            str_arg(sub, "image-id"),
            *sub.get_one::<usize>("pair").expect("required"),
            *sub.get_one::<f64>("fraction").expect("default"),
            out,
        ),
        "gradcheck" => cmd_gradcheck(&cfg, out),
        "ablate" => cmd_ablate(&cfg, str_arg(sub, "suite"), str_arg(sub, "seeds"), out),
        other => Err(CliError::Config(format!("unknown subcommand `{other}`"))),
    }
}

fn str_arg<'a>(m: &'a ArgMatches, id: &str) -> &'a str {
    m.get_one::<String>(id).map(String::as_str).expect("argument has a default or is required")
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_checkpoint(cfg: &RunConfig) -> Result<(Model, ParamStore), CliError> {
    let bytes = read_file(Path::new(&cfg.paths.checkpoint))?;
    Ok(load_model(&bytes, &cfg.model)?)
}

fn table(cfg: &RunConfig) -> Result<ActionTable, CliError> {
    Ok(load_table(Path::new(&cfg.paths.data), cfg.synth.n_actions())?)
}

fn find_sample(cfg: &RunConfig, split: &str, image_id: &str) -> Result<Sample, CliError> {
    load_split(Path::new(&cfg.paths.data), split)?
        .into_iter()
        .find(|s| s.image_id() == image_id)
        .ok_or_else(|| CliError::Config(format!("no image `{image_id}` in split `{split}`")))
}

pub fn cmd_synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let files = emit_dataset(&cfg.synth, Path::new(&cfg.paths.data))?;
    writeln!(out, "wrote {} files to {}", files.len(), cfg.paths.data)?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, resume: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let data = Path::new(&cfg.paths.data);
    let train = load_split(data, "train")?;
    let table = table(cfg)?;
    let run_dir = Path::new(&cfg.paths.out);
    fs::create_dir_all(run_dir)?;
    let ckpt = PathBuf::from(&cfg.paths.checkpoint);
    ensure_parent(&ckpt)?;
    let metrics_path = run_dir.join("metrics.jsonl");
    let (mut trainer, mut metrics) = if resume {
        let t = Trainer::from_checkpoint(&read_file(&ckpt)?, &cfg.model, &cfg.train)?;
        let m = if metrics_path.exists() { read_file(&metrics_path)? } else { Vec::new() };
        (t, m)
    } else {
        (Trainer::new(&cfg.model, &cfg.train)?, Vec::new())
    };
    write_atomic(&run_dir.join("run.cfg"), cfg.to_text().as_bytes())?;
    loop {
        match trainer.run_epoch(&train, &table) {
            Ok(Some(log)) => {
                write_metrics(&mut metrics, &log)?;
                write_all_atomic(&[(ckpt.clone(), trainer.checkpoint_bytes()?), (metrics_path.clone(), metrics.clone())])?;
                writeln!(out, "epoch {} step {} loss {:.6} lr {:e}", log.epoch, log.step, log.loss, log.lr)?;
            }
            Ok(None) => break,
            Err(e) => {
                if let Some(dump) = &trainer.last_dump {
                    let mut bytes = serde_json::to_vec_pretty(dump).map_err(|e| CliError::Io(e.to_string()))?;
                    bytes.push(b'\n');
                    write_atomic(&run_dir.join("nan_dump.json"), &bytes)?;
                }
                return Err(e.into());
            }
        }
    }
    writeln!(out, "checkpoint {}", ckpt.display())?;
    Ok(())
}

pub fn cmd_infer(cfg: &RunConfig, split: &str, out: &mut dyn Write) -> Result<(), CliError> {
    let (model, store) = load_checkpoint(cfg)?;
    let samples = load_split(Path::new(&cfg.paths.data), split)?;
    let records = infer(&model, &store, &samples, &table(cfg)?)?;
    let mut buf = Vec::new();
    write_results(&mut buf, &records)?;
    let path = Path::new(&cfg.paths.results);
    ensure_parent(path)?;
    write_atomic(path, &buf)?;
    writeln!(out, "wrote {} records to {}", records.len(), path.display())?;
    Ok(())
}

pub fn cmd_eval(
    cfg: &RunConfig,
    protocol: &str,
    setting: &str,
    scenario: u8,
    split: &str,
    output: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let data = Path::new(&cfg.paths.data);
    let records = read_results(std::io::BufReader::new(&read_file(Path::new(&cfg.paths.results))?[..]))?;
    let gts = read_gt(std::io::BufReader::new(&read_file(&data.join(split).join("gt.jsonl"))?[..]))?;
    let report = match protocol {
        "hico" => {
            let setting: HicoSetting = setting.parse()?;
            let m = hico_map(&records, &gts, &table(cfg)?, &load_split_file(data)?, setting)?;
            let label = if setting == HicoSetting::Default { "default" } else { "known-objects" };
            json!({"protocol": "hico", "setting": label, "full": m.full, "rare": m.rare, "non_rare": m.non_rare, "per_class": m.per_class})
        }
        _ => {
            let aps = vcoco_role_aps(&records, &gts, scenario)?;
            let mean = if aps.is_empty() { 0.0 } else { aps.values().sum::<f64>() / aps.len() as f64 };
            json!({"protocol": "vcoco", "scenario": scenario, "role_ap": mean, "per_action": aps})
        }
    };
    let line = report.to_string();
    if let Some(path) = output {
        ensure_parent(&path)?;
        write_atomic(&path, format!("{line}\n").as_bytes())?;
    }
    writeln!(out, "{line}")?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_attn_viz(
    cfg: &RunConfig,
    split: &str,
    image_id: &str,
    pair: usize,
    layer: Option<usize>,
    head: Option<usize>,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let (model, store) = load_checkpoint(cfg)?;
    let sample = find_sample(cfg, split, image_id)?;
    let (prep, record) = record_attention(&model, &store, &sample, &table(cfg)?)?;
    let layers: Vec<usize> = layer.map_or_else(|| (0..record.layers.len()).collect(), |l| vec![l]);
    let n_heads = record.layers.first().map_or(0, Vec::len);
    let heads: Vec<usize> = head.map_or_else(|| (0..n_heads).collect(), |h| vec![h]);
    let mut files = Vec::new();
    for &l in &layers {
        for &h in &heads {
            for (name, img) in attention_images(&sample, &prep, &record, pair, l, h)? {
                files.push((out_dir.join(name), img.to_bytes()));
            }
        }
    }
    fs::create_dir_all(out_dir)?;
    write_all_atomic(&files)?;
    for (path, _) in &files {
        writeln!(out, "{}", path.display())?;
    }
    Ok(())
}

pub fn cmd_mask_probe(cfg: &RunConfig, split: &str, image_id: &str, pair: usize, fraction: f64, out: &mut dyn Write) -> Result<(), CliError> {
    let (model, store) = load_checkpoint(cfg)?;
    let sample = find_sample(cfg, split, image_id)?;
    let r = mask_probe(&model, &store, &sample, &table(cfg)?, pair, fraction)?;
    writeln!(out, "{}", serde_json::to_string(&r).map_err(|e| CliError::Io(e.to_string()))?)?;
    Ok(())
}

pub fn cmd_gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let seed = cfg.train.seed;
    let mut worst = 0.0f64;
    for (op, rep) in op_gradchecks(seed)? {
        writeln!(out, "op {op:<12} max_rel_error {:.3e}", rep.max_rel_error)?;
        worst = worst.max(rep.max_rel_error);
    }
    for mode in [PeMode::None, PeMode::Additive, PeMode::Concat, PeMode::ConcatModulated] {
        let rep = decoder_gradcheck(mode, seed)?;
        writeln!(out, "decoder {mode:<16} max_rel_error {:.3e} coordinates {}", rep.max_rel_error, rep.coordinates)?;
        worst = worst.max(rep.max_rel_error);
    }
    if !(worst < GRADCHECK_TOLERANCE) {
        return Err(CliError::Numeric(format!("max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}")));
    }
    writeln!(out, "ok max_rel_error {worst:.3e}")?;
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig, suite: &str, seeds: &str, out: &mut dyn Write) -> Result<(), CliError> {
    let suite: Suite = suite.parse()?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| CliError::Config(format!("bad seed `{s}`"))))
        .collect::<Result<_, _>>()?;
    let ds = load_dataset(Path::new(&cfg.paths.data), cfg.synth.n_actions())?;
    let mut lines = Vec::new();
    let table = run_ablation(suite, &cfg.model, &cfg.train, &ds, &seeds, |r| {
        lines.push(format!("{} seed {} full {:.2} loss {:.4} {:.1}s", r.variant, r.seed, r.map.full, r.final_loss, r.seconds));
    })?;
    for l in &lines {
        writeln!(out, "{l}")?;
    }
    let rendered = table.render();
    let run_dir = Path::new(&cfg.paths.out);
    fs::create_dir_all(run_dir)?;
    let name = if suite == Suite::Table2 { "ablation_table2.txt" } else { "ablation_table4.txt" };
    write_atomic(&run_dir.join(name), rendered.as_bytes())?;
    write!(out, "{rendered}")?;
    Ok(())
}
