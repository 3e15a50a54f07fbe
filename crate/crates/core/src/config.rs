//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional
//! and defaults to the library default. Parsing reports every problem at once:
//! malformed lines, unknown or repeated keys, unparsable values and violated
//! constraints. Serializing writes every key, so a parsed file re-serializes to
//! an equivalent configuration.
//!
//! Model keys: `architecture` (shorthand for the next three), `num_blocks`,
//! `c1`, `c2`, `alphabet_size`, `input_height`, `gate_variant`,
//! `layer_norm_everywhere`, `layer_norm_ends`, `batch_norm`,
//! `stem_nonlinearity`, `dropout_rate`, `gate_kernel`, `stem_kernel`,
//! `stem_channels`, `bn_momentum`, `bn_epsilon`, `renorm_r_max`,
//! `renorm_d_max`, `renorm_ramp_start`, `renorm_ramp_end`.
//!
//! Training keys: `batch_size`, `epochs`, `base_lr`, `decay_factor`,
//! `decay_horizon`, `adam_beta1`, `adam_beta2`, `adam_epsilon`,
//! `polyak_decay`, `seed`, `target_cer`, `beam_width`, `top_n`, `alphabet`.
//!
//! Augmentation keys: `p_projective`, `p_elastic`, `p_signflip`,
//! `grid_spacing`, `elastic_max_disp`, `projective_max_shift`, `augment_seed`.
//!
//! Synthetic corpus keys: `alphabet`, `min_len`, `max_len`, `glyph_scale`,
//! `height`, `spacing_jitter`, `noise`, `count`, `seed`.

use std::collections::{HashMap, HashSet};
use std::fmt::Debug;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{GateVariant, ModelConfig, StemNonlinearity};
use crate::synth::SyntheticConfig;
use crate::train::TrainConfig;

/// Splits text into `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    let mut problems = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                let k = k.trim().to_string();
                if !seen.insert(k.clone()) {
                    problems.push(format!("line {}: key {k} repeated", n + 1));
                }
                pairs.push((k, v.trim().to_string()));
            }
            _ => problems.push(format!("line {}: expected key = value, got {line:?}", n + 1)),
        }
    }
    if problems.is_empty() {
        Ok(pairs)
    } else {
        Err(Error::Config(problems))
    }
}

/// Typed access to parsed pairs that accumulates problems.
struct Fields {
    map: HashMap<String, String>,
    used: HashSet<String>,
    problems: Vec<String>,
}

impl Fields {
    fn new(pairs: Vec<(String, String)>) -> Self {
        Fields {
            map: pairs.into_iter().collect(),
            used: HashSet::new(),
            problems: Vec::new(),
        }
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.map.get(key).cloned()
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) {
        if let Some(v) = self.raw(key) {
            match v.parse() {
                Ok(x) => *slot = x,
                Err(_) => self.problems.push(format!("{key}: cannot parse {v:?}")),
            }
        }
    }

    /// `none` clears the option.
    fn set_opt<T: FromStr>(&mut self, key: &str, slot: &mut Option<T>) {
        if let Some(v) = self.raw(key) {
            if v.eq_ignore_ascii_case("none") {
                *slot = None;
            } else {
                match v.parse() {
                    Ok(x) => *slot = Some(x),
                    Err(_) => self.problems.push(format!("{key}: cannot parse {v:?}")),
                }
            }
        }
    }

    fn set_with<T>(&mut self, key: &str, slot: &mut T, parse: impl Fn(&str) -> Option<T>, expected: &str) {
        if let Some(v) = self.raw(key) {
            match parse(&v) {
                Some(x) => *slot = x,
                None => self.problems.push(format!("{key}: expected {expected}, got {v:?}")),
            }
        }
    }

    fn unknown_keys(&mut self) {
        let mut unknown: Vec<&String> = self.map.keys().filter(|k| !self.used.contains(*k)).collect();
        unknown.sort();
        let msgs: Vec<String> = unknown.into_iter().map(|k| format!("unknown key {k}")).collect();
        self.problems.extend(msgs);
    }

    fn finish(mut self, violations: Vec<String>) -> Result<()> {
        self.unknown_keys();
        self.problems.extend(violations);
        if self.problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(self.problems))
        }
    }
}

fn read_model(f: &mut Fields, m: &mut ModelConfig) {
    if let Some(arch) = f.raw("architecture") {
        match ModelConfig::from_notation(&arch, m.alphabet_size.max(1)) {
            Ok(a) => {
                m.num_blocks = a.num_blocks;
                m.c1 = a.c1;
                m.c2 = a.c2;
            }
            Err(e) => f.problems.push(format!("architecture: {e}")),
        }
    }
    f.set("num_blocks", &mut m.num_blocks);
    f.set("c1", &mut m.c1);
    f.set_opt("c2", &mut m.c2);
    f.set("alphabet_size", &mut m.alphabet_size);
    f.set("input_height", &mut m.input_height);
    let names = GateVariant::ALL.map(|v| v.name()).join(", ");
    f.set_with("gate_variant", &mut m.gate_variant, GateVariant::from_name, &names);
    let n = &mut m.normalization;
    f.set("layer_norm_everywhere", &mut n.layer_norm_everywhere);
    f.set("layer_norm_ends", &mut n.layer_norm_ends);
    f.set("batch_norm", &mut n.batch_norm);
    f.set_with(
        "stem_nonlinearity",
        &mut n.stem_nonlinearity,
        StemNonlinearity::from_name,
        "softmax, tanh or none",
    );
    f.set("dropout_rate", &mut m.dropout_rate);
    f.set("gate_kernel", &mut m.gate_kernel);
    f.set("stem_kernel", &mut m.stem_kernel);
    f.set("stem_channels", &mut m.stem_channels);
    let bn = &mut m.batch_norm;
    f.set("bn_momentum", &mut bn.momentum);
    f.set("bn_epsilon", &mut bn.epsilon);
    f.set("renorm_r_max", &mut bn.renorm.r_max_end);
    f.set("renorm_d_max", &mut bn.renorm.d_max_end);
    f.set("renorm_ramp_start", &mut bn.renorm.ramp_start);
    f.set("renorm_ramp_end", &mut bn.renorm.ramp_end);
}

fn read_train(f: &mut Fields, t: &mut TrainConfig) {
    f.set("batch_size", &mut t.batch_size);
    f.set("epochs", &mut t.epochs);
    f.set("base_lr", &mut t.schedule.base_lr);
    f.set("decay_factor", &mut t.schedule.decay_factor);
    f.set("decay_horizon", &mut t.schedule.decay_horizon);
    f.set("adam_beta1", &mut t.adam.beta1);
    f.set("adam_beta2", &mut t.adam.beta2);
    f.set("adam_epsilon", &mut t.adam.epsilon);
    f.set("polyak_decay", &mut t.polyak_decay);
    f.set("seed", &mut t.seed);
    f.set_opt("target_cer", &mut t.target_cer);
    f.set("beam_width", &mut t.beam_width);
    f.set("top_n", &mut t.top_n);
    let a = &mut t.augment;
    f.set("p_projective", &mut a.p_projective);
    f.set("p_elastic", &mut a.p_elastic);
    f.set("p_signflip", &mut a.p_signflip);
    f.set("grid_spacing", &mut a.grid_spacing);
    f.set("elastic_max_disp", &mut a.elastic_max_disp);
    f.set("projective_max_shift", &mut a.projective_max_shift);
    f.set("augment_seed", &mut a.rng_seed);
}

fn line<V: Debug>(out: &mut String, key: &str, v: V) {
    out.push_str(&format!("{key} = {v:?}\n"));
}

fn line_str(out: &mut String, key: &str, v: &str) {
    out.push_str(&format!("{key} = {v}\n"));
}

fn write_model(out: &mut String, m: &ModelConfig) {
    line(out, "num_blocks", m.num_blocks);
    line(out, "c1", m.c1);
    match m.c2 {
        Some(c2) => line(out, "c2", c2),
        None => line_str(out, "c2", "none"),
    }
    line(out, "alphabet_size", m.alphabet_size);
    line(out, "input_height", m.input_height);
    line_str(out, "gate_variant", m.gate_variant.name());
    let n = &m.normalization;
    line(out, "layer_norm_everywhere", n.layer_norm_everywhere);
    line(out, "layer_norm_ends", n.layer_norm_ends);
    line(out, "batch_norm", n.batch_norm);
    line_str(out, "stem_nonlinearity", n.stem_nonlinearity.name());
    line(out, "dropout_rate", m.dropout_rate);
    line(out, "gate_kernel", m.gate_kernel);
    line(out, "stem_kernel", m.stem_kernel);
    line(out, "stem_channels", m.stem_channels);
    let bn = &m.batch_norm;
    line(out, "bn_momentum", bn.momentum);
    line(out, "bn_epsilon", bn.epsilon);
    line(out, "renorm_r_max", bn.renorm.r_max_end);
    line(out, "renorm_d_max", bn.renorm.d_max_end);
    line(out, "renorm_ramp_start", bn.renorm.ramp_start);
    line(out, "renorm_ramp_end", bn.renorm.ramp_end);
}

fn write_train(out: &mut String, t: &TrainConfig) {
    line(out, "batch_size", t.batch_size);
    line(out, "epochs", t.epochs);
    line(out, "base_lr", t.schedule.base_lr);
    line(out, "decay_factor", t.schedule.decay_factor);
    line(out, "decay_horizon", t.schedule.decay_horizon);
    line(out, "adam_beta1", t.adam.beta1);
    line(out, "adam_beta2", t.adam.beta2);
    line(out, "adam_epsilon", t.adam.epsilon);
    line(out, "polyak_decay", t.polyak_decay);
    line(out, "seed", t.seed);
    match t.target_cer {
        Some(c) => line(out, "target_cer", c),
        None => line_str(out, "target_cer", "none"),
    }
    line(out, "beam_width", t.beam_width);
    line(out, "top_n", t.top_n);
    let a = &t.augment;
    line(out, "p_projective", a.p_projective);
    line(out, "p_elastic", a.p_elastic);
    line(out, "p_signflip", a.p_signflip);
    line(out, "grid_spacing", a.grid_spacing);
    line(out, "elastic_max_disp", a.elastic_max_disp);
    line(out, "projective_max_shift", a.projective_max_shift);
    line(out, "augment_seed", a.rng_seed);
}

pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let mut f = Fields::new(parse_pairs(text)?);
    let mut m = ModelConfig::default();
    read_model(&mut f, &mut m);
    let v = m.violations();
    f.finish(v)?;
    Ok(m)
}

pub fn model_config_text(m: &ModelConfig) -> String {
    let mut out = String::new();
    write_model(&mut out, m);
    out
}

pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut f = Fields::new(parse_pairs(text)?);
    let mut t = TrainConfig::default();
    read_train(&mut f, &mut t);
    let v = t.violations();
    f.finish(v)?;
    Ok(t)
}

pub fn train_config_text(t: &TrainConfig) -> String {
    let mut out = String::new();
    write_train(&mut out, t);
    out
}

/// Model and training settings of the `train` command.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Symbols in class order; derived from the training transcripts when
    /// absent.
    pub alphabet: Option<String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Fields::new(parse_pairs(text)?);
        let mut rc = RunConfig {
            alphabet: f.raw("alphabet"),
            ..Default::default()
        };
        if let Some(a) = &rc.alphabet {
            rc.model.alphabet_size = a.chars().count();
        }
        read_model(&mut f, &mut rc.model);
        read_train(&mut f, &mut rc.train);
        let mut v = rc.model.violations();
        v.extend(rc.train.violations());
        if let Some(a) = &rc.alphabet {
            if a.chars().count() != rc.model.alphabet_size {
                v.push(format!(
                    "alphabet has {} symbols but alphabet_size is {}",
                    a.chars().count(),
                    rc.model.alphabet_size
                ));
            }
        }
        f.finish(v)?;
        Ok(rc)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(a) = &self.alphabet {
            line_str(&mut out, "alphabet", a);
        }
        write_model(&mut out, &self.model);
        write_train(&mut out, &self.train);
        out
    }
}

pub fn parse_synthetic_config(text: &str) -> Result<SyntheticConfig> {
    let mut f = Fields::new(parse_pairs(text)?);
    let mut s = SyntheticConfig::default();
    if let Some(a) = f.raw("alphabet") {
        s.alphabet = a;
    }
    f.set("min_len", &mut s.min_len);
    f.set("max_len", &mut s.max_len);
    f.set("glyph_scale", &mut s.glyph_scale);
    f.set("height", &mut s.height);
    f.set("spacing_jitter", &mut s.spacing_jitter);
    f.set("noise", &mut s.noise);
    f.set("count", &mut s.count);
    f.set("seed", &mut s.seed);
    let v = s.violations();
    f.finish(v)?;
    Ok(s)
}

pub fn synthetic_config_text(s: &SyntheticConfig) -> String {
    let mut out = String::new();
    line_str(&mut out, "alphabet", &s.alphabet);
    line(&mut out, "min_len", s.min_len);
    line(&mut out, "max_len", s.max_len);
    line(&mut out, "glyph_scale", s.glyph_scale);
    line(&mut out, "height", s.height);
    line(&mut out, "spacing_jitter", s.spacing_jitter);
    line(&mut out, "noise", s.noise);
    line(&mut out, "count", s.count);
    line(&mut out, "seed", s.seed);
    out
}
