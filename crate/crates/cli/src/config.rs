//! Run configuration: a TOML document layered over the benchmark defaults,
//! then command-line flags on top.

use std::fs;
use std::path::Path;

use bagreid::experiment::{bag_policies, benchmark_gen, benchmark_shape, benchmark_train, NetShape};
use bagreid::gradcheck::GradCheckConfig;
use bagreid::synth::{BagPolicy, GenConfig};
use bagreid::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateConfig {
    /// Seeds `seed .. seed + seeds` are run for every cell.
    pub seeds: u64,
    pub policies: Vec<BagPolicy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub gen: GenConfig,
    pub net: NetShape,
    pub train: TrainConfig,
    pub gradcheck: GradCheckConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gen: benchmark_gen(BagPolicy::Fixed { k: 2 }, 0),
            net: benchmark_shape(),
            train: benchmark_train(0),
            gradcheck: GradCheckConfig::default(),
            ablate: AblateConfig { seeds: 5, policies: bag_policies() },
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid with the file at `path` if given.
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?;
                Self::from_toml(&text).map_err(|e| format!("{}: {e}", p.display()))
            }
        }
    }

    /// Keys absent from `text` keep their default; unknown keys are rejected
    /// by name.
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let user: Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut base = Table::try_from(Self::default()).map_err(|e| e.to_string())?;
        merge(&mut base, user, "")?;
        Value::Table(base).try_into().map_err(|e: toml::de::Error| e.to_string())
    }

    /// Propagates the top-level seed into every section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.gen.seed = seed;
        self.train.seed = seed;
        self.gradcheck.seed = seed;
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut errs = Vec::new();
        if let Err(e) = self.gen.validate() {
            errs.push(format!("[gen] {e}"));
        }
        if let Err(e) = self.train.validate() {
            errs.push(format!("[train] {e}"));
        }
        if self.net.d_embed == 0 || self.net.hidden.contains(&0) {
            errs.push("[net] layer widths must be >= 1".into());
        }
        if self.ablate.seeds == 0 {
            errs.push("[ablate] seeds must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs.join("; "))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Recursive table merge: tables merge key by key, anything else replaces.
/// Enum values (tables carrying a `kind` tag) replace wholesale, since their
/// fields depend on the variant.
fn merge(base: &mut Table, user: Table, path: &str) -> Result<(), String> {
    for (key, value) in user {
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(u)) if !u.contains_key("kind") => merge(b, u, &full)?,
            (Some(slot), v) => *slot = v,
            (None, _) => return Err(format!("unknown config key '{full}'")),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use bagreid::graph::SigmaPolicy;
    use bagreid::train::PseudoMode;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_toml("[train]\nepochs = 3\n[gen]\nm = 7\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.gen.m, 7);
        let d = RunConfig::default();
        assert_eq!(cfg.train.weights, d.train.weights);
        assert_eq!(cfg.gen.center_scale, d.gen.center_scale);
    }

    #[test]
    fn enum_fields_switch_variant() {
        let text = "[train]\npseudo_mode = { kind = \"icm\", max_sweeps = 4 }\n[train.kernel]\nsigma = { kind = \"median\" }\n[gen]\nids_per_bag = { kind = \"random\", k_max = 5 }\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.train.pseudo_mode, PseudoMode::Icm { max_sweeps: 4 });
        assert_eq!(cfg.train.kernel.sigma, SigmaPolicy::Median);
        assert_eq!(cfg.gen.ids_per_bag, BagPolicy::Random { k_max: 5 });
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("[train]\nepocs = 3\n").unwrap_err();
        assert!(err.contains("train.epocs"), "{err}");
        let err = RunConfig::from_toml("bogus = 1\n").unwrap_err();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn type_errors_are_reported() {
        assert!(RunConfig::from_toml("[train]\nepochs = \"many\"\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn validation_names_the_section() {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 0;
        assert!(cfg.validate().unwrap_err().contains("[train]"));
    }
}
