//! Flat `key=value` settings resolved from defaults, a config file and flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tkfmh::likelihood::{auto_level, Band, Boundary, DpOptions};
use tkfmh::phylo::{make_star, parse_newick, PhyloTree};
use tkfmh::substitution::Alphabet;
use tkfmh::EvolParams;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Loglik,
    Scan,
    Check,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Loglik => "loglik",
            Command::Scan => "scan",
            Command::Check => "check",
        }
    }

    fn defaults(self) -> Vec<(&'static str, &'static str)> {
        const COMMON: [(&str, &str); 5] =
            [("star_times", "1,1,1"), ("lambda", "0.02"), ("alpha", "0.1"), ("alphabet", "ACGT"), ("seed", "1")];
        let specific: &[(&str, &str)] = match self {
            Command::Simulate => &[("n", "1000"), ("replicates", "1"), ("out", "tkfmh_out")],
            Command::Loglik => &[
                ("mode", "q"),
                ("band", "auto"),
                ("tolerance", "1e-9"),
                ("boundary", "structures"),
            ],
            Command::Scan => &[
                ("n", "500"),
                ("replicates", "50"),
                ("grid_points", "7"),
                ("grid_step", "0.25"),
                ("band", "level:1"),
                ("tolerance", "1e-9"),
                ("boundary", "structures"),
                ("ancestral", "true"),
                ("force", "false"),
                ("out", "tkfmh_out"),
            ],
            Command::Check => &[("n", "1000"), ("replicates", "200")],
        };
        specific
            .iter()
        .chain(COMMON.iter())
        .copied()
        .collect()
    }

    fn optional(self) -> &'static [&'static str] {
        match self {
            Command::Simulate => &["tree", "nu"],
            Command::Loglik => &["tree", "nu", "fasta", "n", "max_cols", "max_ins"],
            Command::Scan => &["tree", "nu", "lambda_values", "alpha_values"],
            Command::Check => &["tree", "nu"],
        }
    }

    fn accepts(self, key: &str) -> bool {
        key == "command" || self.defaults().iter().any(|(k, _)| *k == key) || self.optional().contains(&key)
    }
}

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("config line {}: expected key=value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub command: Command,
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Layers flags over the config file over the command defaults.
    pub fn resolve(
        command: Command,
        file: Option<&Path>,
        flags: BTreeMap<String, String>,
    ) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> =
            command.defaults().iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_kv(&text)? {
                if !command.accepts(&k) {
                    return Err(CliError::Validation(format!("unknown key {k:?} for {}", command.name())));
                }
                if k == "command" && v != command.name() {
                    return Err(CliError::Validation(format!("config is for command {v:?}, not {}", command.name())));
                }
                values.insert(k, v);
            }
        }
        for (k, v) in flags {
            if !command.accepts(&k) {
                return Err(CliError::Validation(format!("option --{} does not apply to {}", k.replace('_', "-"), command.name())));
            }
            values.insert(k, v);
        }
        values.remove("command");
        Ok(Self { command, values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.raw(key).ok_or_else(|| CliError::Validation(format!("{} needs {key}", self.command.name())))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.require(key)?;
        v.parse().map_err(|_| CliError::Validation(format!("{key} = {v:?} is not a valid value")))
    }

    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.raw(key).map(|_| self.parse(key)).transpose()
    }

    pub fn list(&self, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
            .map_err(|_| CliError::Validation(format!("{key} = {v:?} is not a comma-separated number list")))
    }

    pub fn positive(&self, key: &str) -> Result<usize, CliError> {
        let v: usize = self.parse(key)?;
        if v == 0 {
            return Err(CliError::Validation(format!("{key} must be at least 1")));
        }
        Ok(v)
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.require(key)? {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(CliError::Validation(format!("{key} = {v:?} is not a boolean"))),
        }
    }

    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        Ok(PathBuf::from(self.require("out")?))
    }

    pub fn alphabet(&self) -> Result<Alphabet, CliError> {
        Ok(Alphabet::new(self.require("alphabet")?.chars())?)
    }

    pub fn theta(&self) -> Result<EvolParams, CliError> {
        let size = self.alphabet()?.len();
        let lambda = self.parse("lambda")?;
        let alpha = self.parse("alpha")?;
        let theta = match self.list("nu")? {
            Some(nu) if nu.len() != size => {
                return Err(CliError::Validation(format!("nu has {} entries for a {size}-symbol alphabet", nu.len())))
            }
            Some(nu) => EvolParams::new(lambda, alpha, nu)?,
            None => EvolParams::uniform(lambda, alpha, size)?,
        };
        Ok(theta)
    }

    /// Newick file when `tree` is set, otherwise a star with `star_times`.
    pub fn tree(&self) -> Result<PhyloTree, CliError> {
        if let Some(path) = self.raw("tree") {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read tree {path}: {e}")))?;
            return Ok(parse_newick(text.trim())?);
        }
        let times = self.list("star_times")?.unwrap_or_default();
        Ok(make_star(times.len(), &times)?)
    }

    pub fn dp(&self) -> Result<DpOptions, CliError> {
        let band = parse_band(self.require("band")?)?;
        let boundary = match self.require("boundary")? {
            "structures" => Boundary::Structures,
            "survivor-start" => Boundary::SurvivorStart,
            v => return Err(CliError::Validation(format!("boundary = {v:?}; expected structures or survivor-start"))),
        };
        let tolerance: f64 = self.parse("tolerance")?;
        if !(tolerance > 0.0) {
            return Err(CliError::Validation("tolerance must be positive".into()));
        }
        Ok(DpOptions { boundary, band, tolerance })
    }

    /// Resolved settings in the config-file format, preceded by the command.
    pub fn manifest(&self) -> String {
        let mut out = format!("# tkfmh {}\ncommand={}\n", env!("CARGO_PKG_VERSION"), self.command.name());
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

/// `full`, `auto`, `fixed:W`, `level:I` or `adaptive:CUT:MARGIN`.
pub fn parse_band(text: &str) -> Result<Band, CliError> {
    let bad = || CliError::Validation(format!("band = {text:?}; expected full, auto, fixed:W, level:I or adaptive:CUT:MARGIN"));
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        ["full"] => Ok(Band::Full),
        ["auto"] => Ok(Band::Auto),
        ["fixed", w] => Ok(Band::Fixed(w.parse().map_err(|_| bad())?)),
        ["level", i] => Ok(auto_level(i.parse().map_err(|_| bad())?)),
        ["adaptive", cut, margin] => {
            let cut: f64 = cut.parse().map_err(|_| bad())?;
            if !(cut > 0.0) {
                return Err(bad());
            }
            Ok(Band::Adaptive { cut, margin: margin.parse().map_err(|_| bad())? })
        }
        _ => Err(bad()),
    }
}
