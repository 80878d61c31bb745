//! Run configuration file: `key = value` lines grouped under `[section]`
//! headers, `#` comments. Every key has a default; unknown keys are errors.

use std::fmt::Display;
use std::str::FromStr;

use pvic::datasyn::{ActionKind, SynthConfig};
use pvic::model::ModelConfig;
use pvic::trainer::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub data: String,
    pub out: String,
    pub checkpoint: String,
    pub results: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            out: "run".into(),
            checkpoint: "run/checkpoint.pvck".into(),
            results: "run/results.jsonl".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig { channels: 64, ..SynthConfig::default() };
        let model = ModelConfig::new(64, synth.n_actions());
        Self { synth, model, train: TrainConfig::default(), paths: Paths::default() }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn set<T: FromStr>(slot: &mut T, key: &str, v: &str) -> Result<(), CliError> {
    *slot = parse(key, v)?;
    Ok(())
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    let v = v.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn kind_text(k: &ActionKind) -> String {
    match k {
        ActionKind::Geometry { dy } => format!("geometry:{dy}"),
        ActionKind::Blob => "blob".into(),
    }
}

fn parse_kind(key: &str, v: &str) -> Result<ActionKind, CliError> {
    match v.trim() {
        "blob" => Ok(ActionKind::Blob),
        other => other
            .strip_prefix("geometry:")
            .map(|dy| parse(key, dy).map(|dy| ActionKind::Geometry { dy }))
            .unwrap_or_else(|| Err(CliError::Config(format!("`{key}`: unknown action kind `{other}`")))),
    }
}

macro_rules! simple_keys {
    ($( $section:literal $key:literal => $($field:ident).+ ;)*) => {
        const SIMPLE_KEYS: &[(&str, &str)] = &[$(($section, $key)),*];

        fn get_simple(c: &RunConfig, section: &str, key: &str) -> Option<String> {
            match (section, key) {
                $(($section, $key) => Some(c.$($field).+.to_string()),)*
                _ => None,
            }
        }

        fn set_simple(c: &mut RunConfig, section: &str, key: &str, v: &str) -> Option<Result<(), CliError>> {
            match (section, key) {
                $(($section, $key) => Some(set(&mut c.$($field).+, key, v)),)*
                _ => None,
            }
        }
    };
}

simple_keys! {
    "synth" "data_seed" => synth.seed;
    "synth" "n_train" => synth.n_train;
    "synth" "n_test" => synth.n_test;
    "synth" "image_width" => synth.image_width;
    "synth" "image_height" => synth.image_height;
    "synth" "map_height" => synth.map_height;
    "synth" "map_width" => synth.map_width;
    "synth" "min_centre_dist" => synth.min_centre_dist;
    "synth" "geometry_prob" => synth.geometry_prob;
    "synth" "blob_prob" => synth.blob_prob;
    "synth" "max_distractors" => synth.max_distractors;
    "synth" "box_noise" => synth.box_noise;
    "synth" "score_noise" => synth.score_noise;
    "synth" "feature_noise" => synth.feature_noise;
    "synth" "object_amplitude" => synth.object_amplitude;
    "synth" "blob_amplitude" => synth.blob_amplitude;
    "synth" "blob_sigma" => synth.blob_sigma;
    "synth" "rare_threshold" => synth.rare_threshold;
    "model" "d_model" => model.decoder.d_model;
    "model" "n_layers" => model.decoder.n_layers;
    "model" "n_heads" => model.decoder.n_heads;
    "model" "window" => model.decoder.window;
    "model" "ffn_hidden" => model.decoder.ffn_hidden;
    "model" "sinusoid_d" => model.decoder.sinusoid.d;
    "model" "tau" => model.decoder.sinusoid.tau;
    "model" "pe_mode" => model.decoder.pe_mode;
    "model" "self_attn" => model.decoder.self_attn;
    "model" "cross_attn" => model.decoder.cross_attn;
    "model" "ffn" => model.decoder.ffn;
    "model" "feature_head" => model.decoder.feature_head;
    "model" "activation" => model.decoder.activation;
    "model" "unary_heads" => model.unary_heads;
    "model" "unary_ffn" => model.unary_ffn;
    "model" "unary_tau" => model.unary_tau;
    "model" "filter_thresh" => model.filter.thresh;
    "model" "filter_min" => model.filter.min_n;
    "model" "filter_max" => model.filter.max_n;
    "model" "alpha" => model.focal.alpha;
    "model" "gamma" => model.focal.gamma;
    "model" "lambda" => model.lambda;
    "model" "target_iou" => model.target_iou;
    "train" "lr" => train.lr;
    "train" "weight_decay" => train.weight_decay;
    "train" "epochs" => train.epochs;
    "train" "lr_drop_epoch" => train.lr_drop_epoch;
    "train" "lr_drop_factor" => train.lr_drop_factor;
    "train" "batch_size" => train.batch_size;
    "train" "seed" => train.seed;
    "train" "init_std" => train.init_std;
    "train" "beta1" => train.beta1;
    "train" "beta2" => train.beta2;
    "train" "eps" => train.eps;
    "paths" "data" => paths.data;
    "paths" "out" => paths.out;
    "paths" "checkpoint" => paths.checkpoint;
    "paths" "results" => paths.results;
}

const SYNTH_LIST_KEYS: [&str; 5] = ["actions", "kinds", "blob_weights", "humans", "objects"];

impl RunConfig {
    /// Every `(section, key)` pair, in file order.
    pub fn keys() -> Vec<(&'static str, &'static str)> {
        let mut keys: Vec<(&str, &str)> = SYNTH_LIST_KEYS.iter().map(|&k| ("synth", k)).collect();
        keys.extend_from_slice(SIMPLE_KEYS);
        keys
    }

    pub fn get(&self, section: &str, key: &str) -> Option<String> {
        if section == "synth" {
            let s = &self.synth;
            match key {
                "actions" => return Some(s.actions.iter().map(|a| list(a)).collect::<Vec<_>>().join(" | ")),
                "kinds" => return Some(s.kinds.iter().map(kind_text).collect::<Vec<_>>().join(",")),
                "blob_weights" => return Some(list(&s.blob_weights)),
                "humans" => return Some(format!("{},{}", s.humans.0, s.humans.1)),
                "objects" => return Some(format!("{},{}", s.objects.0, s.objects.1)),
                _ => {}
            }
        }
        get_simple(self, section, key)
    }

    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), CliError> {
        let v = v.trim();
        if section == "synth" {
            let s = &mut self.synth;
            match key {
                "actions" => {
                    s.actions = v.split('|').map(|part| parse_list(key, part)).collect::<Result<_, _>>()?;
                    s.n_obj_classes = s.actions.len();
                    return Ok(());
                }
                "kinds" => {
                    s.kinds = v.split(',').map(|k| parse_kind(key, k)).collect::<Result<_, _>>()?;
                    return Ok(());
                }
                "blob_weights" => {
                    s.blob_weights = parse_list(key, v)?;
                    return Ok(());
                }
                "humans" | "objects" => {
                    let r: Vec<usize> = parse_list(key, v)?;
                    let [lo, hi] = r[..] else {
                        return Err(CliError::Config(format!("`{key}` takes `min,max`")));
                    };
                    if key == "humans" {
                        s.humans = (lo, hi);
                    } else {
                        s.objects = (lo, hi);
                    }
                    return Ok(());
                }
                _ => {}
            }
        }
        if key == "pe_mode" {
            return set(&mut self.model.decoder.pe_mode, key, &v.replace('-', "_"));
        }
        set_simple(self, section, key, v).unwrap_or_else(|| Err(CliError::Config(format!("unknown key `{section}.{key}`"))))
    }

    /// Section of a key given without one, as flags do. Keys are unique
    /// across sections.
    pub fn section_of(key: &str) -> Option<&'static str> {
        Self::keys().into_iter().find(|(_, k)| *k == key).map(|(s, _)| s)
    }

    /// Fills in values derived from others and checks the whole configuration.
    pub fn finalize(&mut self) -> Result<(), CliError> {
        self.synth.channels = self.model.d_model();
        self.model.decoder.n_actions = self.synth.n_actions();
        self.synth.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| CliError::Config(format!("line {}: {m}", n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["synth", "model", "train", "paths"].contains(&name) {
                    return Err(at(format!("unknown section `[{name}]`")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| at("expected `key = value`".into()))?;
            let key = key.trim();
            let sec = section.as_deref().ok_or_else(|| at(format!("`{key}` appears before any section")))?;
            if !seen.insert((sec.to_string(), key.to_string())) {
                return Err(at(format!("duplicate key `{sec}.{key}`")));
            }
            cfg.set(sec, key, value).map_err(|e| at(e.to_string()))?;
        }
        cfg.finalize()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key) in Self::keys() {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out += &format!("[{section}]\n");
                current = section;
            }
            out += &format!("{key} = {}\n", self.get(section, key).expect("listed key"));
        }
        out
    }

    /// Applies `PVIC_SEED`, which overrides both the data and training seeds.
    pub fn apply_env_seed(&mut self, value: Option<String>) -> Result<(), CliError> {
        if let Some(v) = value {
            let seed: u64 = parse("PVIC_SEED", &v)?;
            self.synth.seed = seed;
            self.train.seed = seed;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.finalize().unwrap();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn keys_are_unique_across_sections() {
        let keys = RunConfig::keys();
        let mut names: Vec<_> = keys.iter().map(|(_, k)| *k).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), keys.len());
    }

    #[test]
    fn edits_and_errors() {
        let cfg = RunConfig::parse("[model]\npe_mode = additive # K1\nd_model = 32\nsinusoid_d = 16\n[train]\nlr = 0.001\n").unwrap();
        assert_eq!(cfg.model.decoder.pe_mode, pvic::decoder::PeMode::Additive);
        assert_eq!(cfg.synth.channels, 32);
        assert_eq!(cfg.train.lr, 1e-3);
        for bad in ["[model]\nbogus = 1\n", "[nope]\n", "lr = 1\n", "[train]\nlr = fast\n", "[train]\nlr = 1\nlr = 2\n", "[train]\nbatch_size = 0\n"] {
            assert!(matches!(RunConfig::parse(bad), Err(CliError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn synth_lists_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("synth", "actions", "0 | 0,1 | 1").unwrap();
        cfg.set("synth", "kinds", "geometry:0.25,blob").unwrap();
        cfg.set("synth", "blob_weights", "0,1").unwrap();
        cfg.finalize().unwrap();
        assert_eq!(cfg.synth.n_obj_classes, 3);
        assert_eq!(cfg.model.decoder.n_actions, 2);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn env_seed_overrides_both_seeds() {
        let mut cfg = RunConfig::default();
        cfg.apply_env_seed(Some("42".into())).unwrap();
        assert_eq!((cfg.synth.seed, cfg.train.seed), (42, 42));
        assert!(cfg.apply_env_seed(Some("x".into())).is_err());
    }
}
