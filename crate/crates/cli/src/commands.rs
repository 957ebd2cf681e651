use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use scakit::classical::{build_templates, cpa_attack, dpa_attack, select_poi, template_attack, Ranking};
use scakit::eval::{rank_curve, CurveParams};
use scakit::rng::component_rng;
use scakit::scnet::{train_with_progress, ArchSpec, EpochRecord, LrSchedule, Model, Normalize, TrainConfig};
use scakit::synth::{desync as desync_set, generate_dataset, KeyMode, SynthConfig};
use scakit::{read_container, write_container, Intermediate, LeakageSpec, PowerModel, TraceSet};

use crate::config::{resolve, Overrides};
use crate::error::{code, CliError};
use crate::{AttackArgs, DesyncArgs, GenArgs, LeakageArgs, Method, RankArgs, TrainArgs};

fn read_set(path: &Path) -> Result<TraceSet, CliError> {
    read_container(path).map_err(|e| CliError::io(path, e))
}

fn write_set(set: &TraceSet, path: &Path) -> Result<(), CliError> {
    write_container(set, path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn emit(report: &Value) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(report)?);
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::invalid(format!("{flag} is required (flag or config file)")))
}

fn parse_intermediate(s: &str) -> Result<Intermediate, CliError> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| CliError::invalid(format!("unknown intermediate {s:?}; expected sbox_out, xor_out or masked_sbox_out")))
}

fn parse_power_model(s: &str) -> Result<PowerModel, CliError> {
    let bad = || CliError::invalid(format!("unknown power model {s:?}; expected hamming_weight, identity or bit_select:<j>"));
    match s {
        "hamming_weight" | "hw" => Ok(PowerModel::HammingWeight),
        "identity" => Ok(PowerModel::Identity),
        _ => {
            let j = s
                .strip_prefix("bit_select:")
                .or_else(|| s.strip_prefix("bit:"))
                .ok_or_else(bad)?;
            j.parse().map(PowerModel::BitSelect).map_err(|_| bad())
        }
    }
}

fn parse_key_mode(s: &str) -> Result<KeyMode, CliError> {
    if s == "random" {
        return Ok(KeyMode::RandomKeys);
    }
    let bad = || CliError::invalid(format!("key_mode {s:?} must be random or fixed:<32 hex digits>"));
    let hex_key = s.strip_prefix("fixed:").ok_or_else(bad)?;
    let bytes = hex::decode(hex_key).map_err(|_| bad())?;
    let key: [u8; 16] = bytes.try_into().map_err(|_| bad())?;
    Ok(KeyMode::FixedKey(key))
}

fn leakage_overrides(o: &mut Overrides, a: &LeakageArgs, byte_path: &str, intermediate_path: &str) -> Result<(), CliError> {
    o.set(byte_path, a.byte);
    o.set(intermediate_path, a.intermediate.as_deref().map(parse_intermediate).transpose()?);
    Ok(())
}

fn check_spec(spec: &LeakageSpec) -> Result<(), CliError> {
    spec.validate().map_err(|e| CliError::invalid(e.to_string()))
}

/// Pearson chi-squared statistic of the label histogram against uniform.
fn label_chi2(set: &TraceSet) -> f64 {
    let mut hist = [0usize; 256];
    for t in set {
        hist[t.meta.label as usize] += 1;
    }
    let e = set.n_traces() as f64 / 256.0;
    hist.iter().map(|&o| (o as f64 - e).powi(2) / e).sum()
}

#[derive(Serialize, Deserialize)]
struct GenConfig {
    traces: usize,
    key_mode: String,
    #[serde(flatten)]
    synth: SynthConfig,
}

pub fn gen(a: GenArgs) -> Result<u8, CliError> {
    let mut o = Overrides::default();
    o.set("traces", a.traces);
    o.set("seed", a.seed);
    o.set("key_mode", a.key_mode);
    let defaults = GenConfig {
        traces: 1000,
        key_mode: "random".into(),
        synth: SynthConfig::default(),
    };
    let r = resolve(defaults, a.config.as_deref(), o)?;
    let cfg = &r.config;
    if cfg.traces == 0 {
        return Err(CliError::invalid("traces must be at least 1"));
    }
    let key_mode = parse_key_mode(&cfg.key_mode)?;
    let set = generate_dataset(cfg.traces, &cfg.synth, key_mode)?;
    write_set(&set, &a.out)?;
    emit(&json!({
        "command": "gen",
        "config": r.record(),
        "out": a.out,
        "n_traces": set.n_traces(),
        "n_points": set.n_points(),
        "label_chi2": label_chi2(&set),
        "label_chi2_dof": 255,
    }))?;
    Ok(code::OK)
}

#[derive(Serialize, Deserialize)]
struct AttackConfig {
    method: String,
    input: Option<PathBuf>,
    profile: Option<PathBuf>,
    leakage: LeakageSpec,
    poi: usize,
}

pub fn attack(a: AttackArgs) -> Result<u8, CliError> {
    let (name, default_model) = match a.method {
        Method::Dpa => ("dpa", PowerModel::BitSelect(0)),
        Method::Cpa => ("cpa", PowerModel::HammingWeight),
        Method::Template => ("template", PowerModel::HammingWeight),
    };
    let mut o = Overrides::default();
    o.set("method", Some(name));
    o.set("input", a.input.clone());
    o.set("profile", a.profile.clone());
    leakage_overrides(&mut o, &a.leakage, "leakage.target_byte", "leakage.intermediate")?;
    o.set("leakage.power_model", a.power_model.as_deref().map(parse_power_model).transpose()?);
    o.set("poi", a.poi);
    let defaults = AttackConfig {
        method: name.into(),
        input: None,
        profile: None,
        leakage: LeakageSpec {
            target_byte: 0,
            intermediate: Intermediate::SboxOut,
            power_model: default_model,
        },
        poi: 5,
    };
    let r = resolve(defaults, a.config.as_deref(), o)?;
    let cfg = &r.config;
    if cfg.method != name {
        return Err(CliError::invalid(format!("config method {:?} conflicts with subcommand {name}", cfg.method)));
    }
    check_spec(&cfg.leakage)?;
    let set = read_set(required(&cfg.input, "--in")?)?;
    let spec = cfg.leakage;
    let ranking: Ranking = match a.method {
        Method::Dpa => {
            let ranking = dpa_attack(&set, &spec)?;
            if ranking.entries.iter().all(|e| e.1.is_none()) {
                return Err(CliError::new(
                    code::ATTACK,
                    "EmptyGroup: every key guess puts all traces in one selection group",
                ));
            }
            ranking
        }
        Method::Cpa => cpa_attack(&set, &spec)?,
        Method::Template => {
            let profile = read_set(required(&cfg.profile, "--profile")?)?;
            if !profile.labels_match(&spec) {
                return Err(CliError::invalid("profiling labels do not follow the leakage spec"));
            }
            if cfg.poi == 0 {
                return Err(CliError::invalid("poi must be at least 1"));
            }
            let poi = select_poi(&profile, &spec, cfg.poi);
            let tpl = build_templates(&profile, &poi)?;
            template_attack(&tpl, &set, &spec)?
        }
    };
    if let Some(path) = &a.report {
        write_file(path, |w| ranking.write_csv(w))?;
    }
    let true_key = set.fixed_key_byte(spec.target_byte);
    let true_rank = true_key.map(|k| ranking.position(k));
    emit(&json!({
        "command": "attack",
        "config": r.record(),
        "report": a.report,
        "best_guess": ranking.best(),
        "true_key": true_key,
        "true_key_rank": true_rank,
    }))?;
    Ok(match true_rank {
        Some(0) | None => code::OK,
        Some(_) => code::NOT_SUCCEEDED,
    })
}

#[derive(Serialize, Deserialize)]
struct TrainRun {
    arch: String,
    train: Option<PathBuf>,
    val: Option<PathBuf>,
    /// When set, stored labels must equal this intermediate of this byte.
    byte: Option<usize>,
    intermediate: Option<Intermediate>,
    training: TrainConfig,
}

pub fn train(a: TrainArgs) -> Result<u8, CliError> {
    let mut o = Overrides::default();
    o.set("arch", a.arch);
    o.set("train", a.train);
    o.set("val", a.val);
    leakage_overrides(&mut o, &a.leakage, "byte", "intermediate")?;
    o.set("training.epochs", a.epochs);
    o.set("training.batch_size", a.batch_size);
    o.set("training.lr", a.lr);
    o.set("training.seed", a.seed);
    o.set("training.validation_fraction", a.validation_fraction);
    let normalize: Option<Normalize> = a
        .normalize
        .map(|s| {
            serde_json::from_value(Value::String(s.clone()))
                .map_err(|_| CliError::invalid(format!("normalize {s:?} must be per_point_standardize or none")))
        })
        .transpose()?;
    o.set("training.normalize", normalize);
    let schedule: Option<LrSchedule> = a
        .schedule
        .map(|s| {
            serde_json::from_value(Value::String(s.clone()))
                .map_err(|_| CliError::invalid(format!("schedule {s:?} must be constant or cosine")))
        })
        .transpose()?;
    o.set("training.schedule", schedule);
    let defaults = TrainRun {
        arch: "scnet".into(),
        train: None,
        val: None,
        byte: None,
        intermediate: None,
        training: TrainConfig::default(),
    };
    let r = resolve(defaults, a.config.as_deref(), o)?;
    let cfg = &r.config;
    let train_set = read_set(required(&cfg.train, "--train")?)?;
    let val_set = cfg.val.as_deref().map(read_set).transpose()?;
    if cfg.byte.is_some() || cfg.intermediate.is_some() {
        let spec = LeakageSpec {
            target_byte: cfg.byte.unwrap_or(0),
            intermediate: cfg.intermediate.unwrap_or(Intermediate::SboxOut),
            power_model: PowerModel::Identity,
        };
        check_spec(&spec)?;
        for (what, set) in [("training", Some(&train_set)), ("validation", val_set.as_ref())] {
            if set.is_some_and(|s| !s.labels_match(&spec)) {
                return Err(CliError::invalid(format!("{what} labels do not match the requested byte/intermediate")));
            }
        }
    }
    let arch = ArchSpec::parse(&cfg.arch, train_set.n_points())?;
    let mut model = Model::<f32>::new(arch, cfg.training.seed)?;
    model.config = Some(r.record());
    let progress = |e: &EpochRecord| {
        eprintln!(
            "epoch {:>3}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}",
            e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
        )
    };
    let (model, history) = train_with_progress(model, &train_set, val_set.as_ref(), &cfg.training, progress)?;
    model.save(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let history_path = a.history.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".history.csv");
        p.into()
    });
    write_file(&history_path, |w| history.write_csv(w))?;
    emit(&json!({
        "command": "train",
        "config": r.record(),
        "out": a.out,
        "history": history_path,
        "parameters": model.parameter_count(),
        "epochs": history.epochs.len(),
        "best_epoch": history.best_epoch,
        "best_val_loss": history.best_epoch.map(|i| history.epochs[i].val_loss),
    }))?;
    Ok(code::OK)
}

#[derive(Serialize, Deserialize)]
struct RankRun {
    model: Option<String>,
    input: Option<PathBuf>,
    step: usize,
    experiments: usize,
    max_traces: Option<usize>,
    seed: u64,
    byte: usize,
    intermediate: Intermediate,
    key: Option<u8>,
}

pub fn rank(a: RankArgs) -> Result<u8, CliError> {
    let mut o = Overrides::default();
    o.set("model", a.model);
    o.set("input", a.input);
    o.set("step", a.step);
    o.set("experiments", a.experiments);
    o.set("max_traces", a.max_traces);
    o.set("seed", a.seed);
    leakage_overrides(&mut o, &a.leakage, "byte", "intermediate")?;
    o.set("key", a.key);
    let defaults = RankRun {
        model: None,
        input: None,
        step: 10,
        experiments: 100,
        max_traces: None,
        seed: 0,
        byte: 0,
        intermediate: Intermediate::SboxOut,
        key: None,
    };
    let r = resolve(defaults, a.config.as_deref(), o)?;
    let cfg = &r.config;
    let spec = LeakageSpec {
        target_byte: cfg.byte,
        intermediate: cfg.intermediate,
        power_model: PowerModel::Identity,
    };
    check_spec(&spec)?;
    let model_name = cfg
        .model
        .as_deref()
        .ok_or_else(|| CliError::invalid("--model is required (flag or config file)"))?;
    let set = read_set(required(&cfg.input, "--in")?)?;
    let key = match cfg.key.or_else(|| set.fixed_key_byte(spec.target_byte)) {
        Some(k) => k,
        None => return Err(CliError::invalid("the set has no single true key; pass --key")),
    };
    let probs: Vec<Vec<f64>> = if model_name == "oracle" {
        set.iter()
            .map(|t| {
                let mut p = vec![0.0; 256];
                p[spec.label_of(&t.meta) as usize] = 1.0;
                p
            })
            .collect()
    } else {
        let path = Path::new(model_name);
        let model = Model::<f32>::load(path).map_err(|e| CliError::io(path, e))?;
        if model.input_len() != set.n_points() {
            return Err(CliError::new(
                code::SHAPE,
                format!("model expects {} points, set has {}", model.input_len(), set.n_points()),
            ));
        }
        model.predict(&set)?
    };
    let metas: Vec<_> = set.iter().map(|t| t.meta).collect();
    let params = CurveParams {
        max_traces: cfg.max_traces.unwrap_or(set.n_traces()),
        step: cfg.step,
        n_experiments: cfg.experiments,
        seed: cfg.seed,
    };
    let curve = rank_curve(&probs, &metas, &spec, key, &params)?;
    write_file(&a.out, |w| curve.write_csv(w))?;
    let summary = curve.summary();
    emit(&json!({
        "command": "rank",
        "config": r.record(),
        "out": a.out,
        "true_key": key,
        "summary": summary,
    }))?;
    Ok(if summary.min_traces_to_rank0.is_some() {
        code::OK
    } else {
        code::NOT_SUCCEEDED
    })
}

#[derive(Serialize, Deserialize)]
struct DesyncRun {
    input: Option<PathBuf>,
    max_offset: usize,
    seed: u64,
}

pub fn desync(a: DesyncArgs) -> Result<u8, CliError> {
    let mut o = Overrides::default();
    o.set("input", a.input);
    o.set("max_offset", a.max_offset);
    o.set("seed", a.seed);
    let defaults = DesyncRun {
        input: None,
        max_offset: 0,
        seed: 0,
    };
    let r = resolve(defaults, a.config.as_deref(), o)?;
    let cfg = &r.config;
    let set = read_set(required(&cfg.input, "--in")?)?;
    let mut rng = component_rng(cfg.seed, "desync");
    let shifted = desync_set(&set, cfg.max_offset, &mut rng)?;
    write_set(&shifted, &a.out)?;
    emit(&json!({
        "command": "desync",
        "config": r.record(),
        "out": a.out,
        "n_traces": shifted.n_traces(),
        "n_points": shifted.n_points(),
    }))?;
    Ok(code::OK)
}
