//! Experiment specification: a flat `key = value` file with `[section]`
//! headers, merged with command-line overrides. No nested structures; every
//! value is a scalar or a comma-separated list.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fti_distill_core::error::{Error, Result};
use fti_distill_core::losses::KlDirection;
use fti_distill_core::math::Comparison;
use fti_distill_core::training::{Method, PatienceUnit, TrainConfig};

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

/// Full experiment description: dataset, teacher, method/budget grids, and
/// the training configuration shared by every run.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub data: PathBuf,
    pub teacher_checkpoint: Option<PathBuf>,
    pub teacher_cache: Option<PathBuf>,
    pub allow_teacher_mismatch: bool,
    pub white_box: bool,
    pub methods: Vec<Method>,
    pub budgets: Vec<u64>,
    /// Template config; `method` and `budget` are overwritten per grid cell.
    pub base: TrainConfig,
    pub out: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            data: PathBuf::from("data.csv"),
            teacher_checkpoint: None,
            teacher_cache: None,
            allow_teacher_mismatch: false,
            white_box: false,
            methods: vec![Method::CeOnly, Method::Kd, Method::Ckd],
            budgets: vec![100, 200, 400, 800],
            base: TrainConfig::new(Method::CeOnly, 0, vec![32, 32, 20]),
            out: PathBuf::from("results"),
        }
    }
}

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| bad(format!("bad {what} entry '{p}'")))
        })
        .collect()
}

pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    s.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(Method::parse)
        .collect()
}

pub fn parse_kl_direction(s: &str) -> Result<KlDirection> {
    match s {
        "student_first" => Ok(KlDirection::StudentFirst),
        "teacher_first" => Ok(KlDirection::TeacherFirst),
        other => Err(bad(format!(
            "unknown kl_direction '{other}' (expected student_first|teacher_first)"
        ))),
    }
}

pub fn parse_patience_unit(s: &str) -> Result<PatienceUnit> {
    match s {
        "epochs" => Ok(PatienceUnit::Epochs),
        "steps" => Ok(PatienceUnit::Steps),
        other => Err(bad(format!(
            "unknown patience_unit '{other}' (expected epochs|steps)"
        ))),
    }
}

/// Parse `[section]` / `key = value` lines into `section.key -> value`.
/// `#` starts a comment; blank lines are ignored.
fn parse_flat_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut section = String::new();
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            bad(format!(
                "{}:{}: expected 'key = value'",
                path.display(),
                lineno + 1
            ))
        })?;
        let full = if section.is_empty() {
            key.trim().to_string()
        } else {
            format!("{section}.{}", key.trim())
        };
        if map.insert(full.clone(), value.trim().to_string()).is_some() {
            return Err(bad(format!(
                "{}:{}: duplicate key '{full}'",
                path.display(),
                lineno + 1
            )));
        }
    }
    Ok(map)
}

fn parse_bool(s: &str, what: &str) -> Result<bool> {
    match s {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(bad(format!("bad {what} value '{s}' (expected true|false)"))),
    }
}

impl ExperimentSpec {
    /// Load a spec file over the defaults. Unknown keys are errors.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut spec = ExperimentSpec::default();
        let map = parse_flat_file(path)?;
        for (key, value) in &map {
            spec.apply(key, value)?;
        }
        Ok(spec)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let b = &mut self.base;
        match key {
            "dataset.path" => self.data = PathBuf::from(value),
            "teacher.checkpoint" => self.teacher_checkpoint = Some(PathBuf::from(value)),
            "teacher.cache" => self.teacher_cache = Some(PathBuf::from(value)),
            "teacher.allow_mismatch" => {
                self.allow_teacher_mismatch = parse_bool(value, key)?
            }
            "experiment.white_box" => self.white_box = parse_bool(value, key)?,
            "experiment.methods" => self.methods = parse_methods(value)?,
            "experiment.budgets" => self.budgets = parse_list(value, key)?,
            "experiment.seeds" => b.seeds = parse_list(value, key)?,
            "experiment.lrs" => b.lr_grid = parse_list(value, key)?,
            "experiment.student_widths" => b.student_widths = parse_list(value, key)?,
            "experiment.k" => b.ckd.k = value.parse().map_err(|_| bad("bad k"))?,
            "experiment.comparison" => b.ckd.comparison = Comparison::parse(value)?,
            "experiment.beta" => b.ckd.beta = value.parse().map_err(|_| bad("bad beta"))?,
            "experiment.ckd_temperature" => {
                b.ckd.temperature = value.parse().map_err(|_| bad("bad ckd_temperature"))?
            }
            "experiment.kl_direction" => b.ckd.kl_direction = parse_kl_direction(value)?,
            "experiment.kd_temperature" => {
                b.kd.temperature = value.parse().map_err(|_| bad("bad kd_temperature"))?
            }
            "experiment.kd_scale_by_t2" => b.kd.scale_by_t2 = parse_bool(value, key)?,
            "experiment.batch_size" => {
                b.protocol.batch_size = value.parse().map_err(|_| bad("bad batch_size"))?
            }
            "experiment.momentum" => {
                b.protocol.momentum = value.parse().map_err(|_| bad("bad momentum"))?
            }
            "experiment.weight_decay" => {
                b.protocol.weight_decay = value.parse().map_err(|_| bad("bad weight_decay"))?
            }
            "experiment.patience" => {
                b.protocol.patience = value.parse().map_err(|_| bad("bad patience"))?
            }
            "experiment.max_decays" => {
                b.protocol.max_decays = value.parse().map_err(|_| bad("bad max_decays"))?
            }
            "experiment.decay_factor" => {
                b.protocol.decay_factor = value.parse().map_err(|_| bad("bad decay_factor"))?
            }
            "experiment.max_epochs" => {
                b.protocol.max_epochs = value.parse().map_err(|_| bad("bad max_epochs"))?
            }
            "experiment.patience_unit" => b.protocol.patience_unit = parse_patience_unit(value)?,
            "experiment.aux_weight" => {
                b.aux_weight = value.parse().map_err(|_| bad("bad aux_weight"))?
            }
            "experiment.mixup_kd_weight" => {
                b.mixup_kd_weight = value.parse().map_err(|_| bad("bad mixup_kd_weight"))?
            }
            "experiment.fitnets_weight" => {
                b.fitnets_weight = value.parse().map_err(|_| bad("bad fitnets_weight"))?
            }
            "experiment.rkd_dist_weight" => {
                b.rkd.w_dist = value.parse().map_err(|_| bad("bad rkd_dist_weight"))?
            }
            "experiment.rkd_angle_weight" => {
                b.rkd.w_angle = value.parse().map_err(|_| bad("bad rkd_angle_weight"))?
            }
            "experiment.dist_inter_weight" => {
                b.dist_inter_weight = value.parse().map_err(|_| bad("bad dist_inter_weight"))?
            }
            "experiment.dist_intra_weight" => {
                b.dist_intra_weight = value.parse().map_err(|_| bad("bad dist_intra_weight"))?
            }
            "experiment.sampler_cap" => {
                b.sampler_cap = value.parse().map_err(|_| bad("bad sampler_cap"))?
            }
            "experiment.jobs" => b.jobs = value.parse().map_err(|_| bad("bad jobs"))?,
            "output.dir" => self.out = PathBuf::from(value),
            other => return Err(bad(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Validate path existence and grid sanity before any work starts.
    pub fn validate(&self) -> Result<()> {
        if !self.data.exists() {
            return Err(bad(format!("dataset file {} not found", self.data.display())));
        }
        for path in [&self.teacher_checkpoint, &self.teacher_cache]
            .into_iter()
            .flatten()
        {
            if !path.exists() {
                return Err(bad(format!("referenced path {} not found", path.display())));
            }
        }
        if self.methods.is_empty() {
            return Err(bad("no methods selected"));
        }
        if self.budgets.is_empty() {
            return Err(bad("no budgets selected"));
        }
        if self.base.lr_grid.is_empty() || self.base.seeds.is_empty() {
            return Err(bad("need at least one learning rate and one seed"));
        }
        let needs_white_box = self.methods.iter().any(|m| m.white_box());
        if needs_white_box && !self.white_box {
            return Err(bad(
                "white-box methods selected; pass --white-box to declare intermediate access",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn parses_a_flat_spec_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(
            f,
            "[dataset]\npath = d.csv\n\n[teacher]\ncheckpoint = t.ckpt\n\n\
             [experiment]\nmethods = ce-only,ckd # trailing comment\nbudgets = 50,100\n\
             k = 4\ncomparison = addition\nseeds = 1,2\nlrs = 0.1\n\
             student_widths = 8,8,4\njobs = 2\n\n[output]\ndir = out"
        )
        .unwrap();
        let spec = ExperimentSpec::from_file(&path).unwrap();
        assert_eq!(spec.data, PathBuf::from("d.csv"));
        assert_eq!(spec.methods, vec![Method::CeOnly, Method::Ckd]);
        assert_eq!(spec.budgets, vec![50, 100]);
        assert_eq!(spec.base.ckd.k, 4);
        assert_eq!(spec.base.ckd.comparison, Comparison::Addition);
        assert_eq!(spec.base.student_widths, vec![8, 8, 4]);
        assert_eq!(spec.base.jobs, 2);
        assert_eq!(spec.out, PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        std::fs::write(&path, "[experiment]\nmystery = 1\n").unwrap();
        assert!(ExperimentSpec::from_file(&path).is_err());
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        std::fs::write(&path, "[experiment]\nk = 2\nk = 3\n").unwrap();
        assert!(ExperimentSpec::from_file(&path).is_err());
    }

    #[test]
    fn white_box_methods_require_the_flag() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d.csv");
        std::fs::write(&data, "id,partition,label,f0\n0,pool,0,1.0\n1,pool,1,2.0\n").unwrap();
        let mut spec = ExperimentSpec {
            data,
            methods: vec![Method::FitNets],
            ..ExperimentSpec::default()
        };
        assert!(spec.validate().is_err());
        spec.white_box = true;
        spec.validate().unwrap();
    }
}
