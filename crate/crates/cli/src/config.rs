//! Run configuration: profile defaults, then a TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use xdlm::corpus::{SYNTH_SOURCE_LANG, SYNTH_TARGET_LANG};
use xdlm::decoding::{DecodeConfig, RoutingMode};
use xdlm::model::ModelConfig;
use xdlm::training::TrainConfig;

/// File name of the resolved configuration written next to a run's outputs.
pub const SNAPSHOT_NAME: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Toy,
    Full,
}

/// Architecture. Vocabulary size, language count and timestep rows come from the
/// tokenizer and the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl ModelSection {
    fn from_config(c: &ModelConfig) -> Self {
        ModelSection {
            n_layers_enc: c.n_layers_enc,
            n_layers_dec: c.n_layers_dec,
            hidden: c.hidden,
            n_heads: c.n_heads,
            ffn_dim: c.ffn_dim,
            max_len: c.max_len,
        }
    }

    pub fn build(&self, vocab_size: usize, n_langs: usize, train: &TrainConfig) -> ModelConfig {
        ModelConfig {
            n_layers_enc: self.n_layers_enc,
            n_layers_dec: self.n_layers_dec,
            hidden: self.hidden,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            n_timesteps: train.diffusion_steps + 1,
            dropout: train.dropout,
            vocab_size,
            n_langs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    pub n_iterations: usize,
    pub length_beam: usize,
    pub routing: RoutingMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareSection {
    /// `copy` or `mapping`; unset means read `source` and `target` (or `tsv`).
    pub synth: Option<String>,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub tsv: Option<PathBuf>,
    pub n_pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub alphabet: usize,
    /// Pairs written to the `test` split.
    pub held_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source_lang: String,
    pub target_lang: String,
    /// Corpus prefixes read as `{prefix}.{source_lang}` / `{prefix}.{target_lang}`.
    pub train: Vec<PathBuf>,
    /// Prefixes read with source and target swapped.
    pub train_reversed: Vec<PathBuf>,
    pub test: Option<PathBuf>,
    /// Directory holding `merges.txt` and `vocab.txt`.
    pub tokenizer: Option<PathBuf>,
    pub bpe_merges: usize,
    pub checkpoint: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub from_scratch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Every random stream is derived from this one value.
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub decode: DecodeSection,
    pub prepare: PrepareSection,
    pub data: DataSection,
}

impl RunConfig {
    /// Documented defaults of a profile. `pretrain` selects the pretraining learning rate
    /// of the full-scale profile.
    pub fn profile(profile: Profile, pretrain: bool) -> Self {
        let (model, train) = match profile {
            Profile::Toy => (ModelConfig::toy(0, 2, 20), TrainConfig::toy()),
            Profile::Full if pretrain => (ModelConfig::full(0, 2, 50), TrainConfig::full_pretrain()),
            Profile::Full => (ModelConfig::full(0, 2, 50), TrainConfig::full()),
        };
        let decode = DecodeConfig::new(train.diffusion_steps);
        RunConfig {
            profile,
            seed: train.seed,
            model: ModelSection::from_config(&model),
            decode: DecodeSection {
                n_iterations: decode.n_iterations,
                length_beam: decode.length_beam,
                routing: decode.routing,
            },
            prepare: PrepareSection {
                synth: None,
                source: None,
                target: None,
                tsv: None,
                n_pairs: 20_000,
                min_len: 1,
                max_len: 10,
                alphabet: 6,
                held_out: 500,
            },
            data: DataSection {
                source_lang: SYNTH_SOURCE_LANG.into(),
                target_lang: SYNTH_TARGET_LANG.into(),
                train: Vec::new(),
                train_reversed: Vec::new(),
                test: None,
                tokenizer: None,
                bpe_merges: 1000,
                checkpoint: None,
                init_checkpoint: None,
                from_scratch: false,
            },
            train,
        }
    }

    pub fn decode_config(&self, trace: bool) -> DecodeConfig {
        DecodeConfig {
            n_iterations: self.decode.n_iterations,
            length_beam: self.decode.length_beam,
            routing: self.decode.routing,
            seed: self.seed,
            trace,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing the resolved configuration")
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}

/// Parses `section.key=value`. The value is read as a TOML literal when it parses as
/// one and as a bare string otherwise.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let Some((key, raw)) = s.split_once('=') else {
        bail!("override {s:?} is not of the form key=value");
    };
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        bail!("override key {key:?} has an empty component");
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("override paths are nonempty");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.clone())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .with_context(|| format!("{p:?} is not a section"))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

fn merge(base: &mut Table, layer: Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(l)) => merge(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// A `train.seed` that disagrees with the layer's top-level seed. Snapshots carry both,
/// equal; anything else would be silently replaced.
fn conflicting_train_seed(layer: &Table, allow_equal: bool) -> bool {
    let train_seed = layer.get("train").and_then(Value::as_table).and_then(|t| t.get("seed"));
    match train_seed {
        None => false,
        Some(v) => !allow_equal || Some(v) != layer.get("seed").or(Some(&Value::Integer(0))),
    }
}

/// Resolves profile, then `file`, then `overrides`. A profile named on the command
/// line wins over one named in the file.
pub fn resolve(
    profile_flag: Option<Profile>,
    file: Option<&Path>,
    overrides: &[(Vec<String>, Value)],
    pretrain: bool,
) -> Result<RunConfig> {
    let file_table: Table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Table::new(),
    };
    let mut flag_table = Table::new();
    for (path, value) in overrides {
        set_path(&mut flag_table, path, value.clone())?;
    }
    if conflicting_train_seed(&file_table, true) || conflicting_train_seed(&flag_table, false) {
        bail!("train.seed is derived from the top-level seed; set `seed` instead");
    }
    let profile = match (profile_flag, file_table.get("profile")) {
        (Some(p), _) => p,
        (None, Some(v)) => v.clone().try_into().context("profile must be \"toy\" or \"full\"")?,
        (None, None) => Profile::Toy,
    };
    let defaults = RunConfig::profile(profile, pretrain);
    let Value::Table(mut table) = Value::try_from(&defaults).context("serializing profile defaults")? else {
        bail!("profile defaults did not serialize to a table");
    };
    merge(&mut table, file_table);
    merge(&mut table, flag_table);
    table.insert("profile".into(), Value::try_from(profile)?);
    let mut cfg: RunConfig = Value::Table(table).try_into().context("invalid configuration")?;
    cfg.train.seed = cfg.seed;
    cfg.train.validate()?;
    if cfg.train.max_len > cfg.model.max_len {
        bail!(
            "train.max_len ({}) exceeds model.max_len ({})",
            cfg.train.max_len,
            cfg.model.max_len
        );
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(s: &str) -> (Vec<String>, Value) {
        parse_override(s).unwrap()
    }

    #[test]
    fn overrides_parse_literals_and_strings() {
        assert_eq!(ov("train.lr=0.5").1, Value::Float(0.5));
        assert_eq!(ov("seed=3").1, Value::Integer(3));
        assert_eq!(ov("data.source_lang=de").1, Value::String("de".into()));
        assert_eq!(ov("decode.routing=\"stochastic\"").1, Value::String("stochastic".into()));
        assert!(parse_override("nothing").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn precedence_is_profile_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "seed = 5\n[train]\nlr = 0.002\nn_steps = 7\n").unwrap();
        let cfg = resolve(None, Some(&file), &[ov("train.n_steps=9")], false).unwrap();
        assert_eq!(cfg.profile, Profile::Toy);
        assert_eq!(cfg.train.lr, 0.002);
        assert_eq!(cfg.train.n_steps, 9);
        assert_eq!(cfg.train.warmup_steps, 500);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.train.seed, 5);
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = resolve(Some(Profile::Full), None, &[ov("train.adam_eps=1e-9")], true).unwrap();
        assert_eq!(cfg.train.lr, 5e-4);
        let snap = dir.path().join(SNAPSHOT_NAME);
        cfg.write_snapshot(&snap).unwrap();
        assert_eq!(resolve(None, Some(&snap), &[], true).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_section_seeds_are_refused() {
        assert!(resolve(None, None, &[ov("train.learning_rate=1")], false).is_err());
        assert!(resolve(None, None, &[ov("train.seed=1")], false).is_err());
        assert!(resolve(None, None, &[ov("train.max_len=65")], false).is_err());
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "seed = 2\n[train]\nseed = 3\n").unwrap();
        assert!(resolve(None, Some(&file), &[], false).is_err());
    }
}
