use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use nuhyp::blocks::DEFAULT_LEVELS;
use nuhyp::TorusPoint;

/// Bad flags, bad config-file entries and missing inputs. Exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Analyze,
    Manifold,
    Shadow,
    Close,
    Horseshoe,
    Spectrum,
    SelectPower,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Manifold => "manifold",
            Command::Shadow => "shadow",
            Command::Close => "close",
            Command::Horseshoe => "horseshoe",
            Command::Spectrum => "spectrum",
            Command::SelectPower => "select-power",
        }
    }
}

/// Everything a run depends on. The output directory is not part of the
/// serialized form, so reruns into different directories hash the same.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub system: String,
    /// sha256 of the coefficient file for `file:` systems
    pub system_sha256: Option<String>,
    /// None: half of eps0 from the measured exponents
    pub epsilon: Option<f64>,
    pub levels: Vec<f64>,
    /// orbit length; return time for horseshoe
    pub n: usize,
    pub window: usize,
    pub seed: u64,
    /// None: drawn from the seed
    pub x0: Option<[f64; 2]>,
    pub t: f64,
    #[serde(skip)]
    pub out: PathBuf,
    pub input: Option<String>,
    /// sha256 of the input file bytes
    pub input_sha256: Option<String>,
    pub solver: String,
    pub period: usize,
    pub gap: f64,
    pub samples: usize,
    pub index: Option<usize>,
    pub tempered: bool,
    pub alphabet_trim: Option<usize>,
    pub support_size: usize,
    pub measure_steps: usize,
    pub candidates: usize,
    pub theta: f64,
    pub powers: Vec<usize>,
    pub budget: usize,
}

impl RunConfig {
    pub fn defaults(command: Command) -> Self {
        let mut c = RunConfig {
            command,
            system: "cat".into(),
            system_sha256: None,
            epsilon: None,
            levels: DEFAULT_LEVELS.to_vec(),
            n: 100_000,
            window: 500,
            seed: 1,
            x0: None,
            t: 2.0,
            out: PathBuf::from("."),
            input: None,
            input_sha256: None,
            solver: "both".into(),
            period: 0,
            gap: 0.0,
            samples: 32,
            index: None,
            tempered: false,
            alphabet_trim: None,
            support_size: 200_000,
            measure_steps: 1_000_000,
            candidates: 200_000,
            theta: 0.5,
            powers: vec![1, 2, 3, 4, 6, 8],
            budget: 40_000_000,
        };
        match command {
            Command::Manifold => c.n = 20_000,
            Command::Close => c.t = 1.0,
            Command::Horseshoe => {
                c.n = 12;
                c.epsilon = Some(0.3);
            }
            Command::Spectrum => {
                c.n = 200_000;
                c.epsilon = Some(0.05);
            }
            _ => {}
        }
        c
    }

    /// Apply one `key = value` setting. Keys accept `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let bad = |what: &str| UsageError(format!("{key}: expected {what}, got `{v}`"));
        match key.as_str() {
            "system" => self.system = v.to_string(),
            "eps" | "epsilon" => {
                self.epsilon = if v == "auto" { None } else { Some(positive(v).ok_or_else(|| bad("a positive number"))?) }
            }
            "levels" => self.levels = list(v, positive).ok_or_else(|| bad("a comma-separated list of levels"))?,
            "n" => self.n = count(v).ok_or_else(|| bad("a non-negative integer"))?,
            "window" => self.window = count(v).ok_or_else(|| bad("a non-negative integer"))?,
            "seed" => self.seed = v.parse().map_err(|_| bad("an unsigned integer"))?,
            "x0" => {
                let p = list(v, |s| s.parse::<f64>().ok().filter(|x| x.is_finite())).filter(|p| p.len() == 2);
                self.x0 = Some(p.map(|p| [p[0], p[1]]).ok_or_else(|| bad("two coordinates `x,y`"))?);
            }
            "t" => self.t = v.parse().ok().filter(|t: &f64| *t >= 1.0).ok_or_else(|| bad("a level t >= 1"))?,
            "out" => self.out = PathBuf::from(v),
            "input" => self.input = Some(v.to_string()),
            "solver" => match v {
                "both" | "constructive" | "newton" => self.solver = v.to_string(),
                _ => return Err(bad("both, constructive or newton")),
            },
            "period" => self.period = count(v).ok_or_else(|| bad("a non-negative integer"))?,
            "gap" => self.gap = v.parse().ok().filter(|g: &f64| *g >= 0.0).ok_or_else(|| bad("a gap >= 0"))?,
            "samples" => self.samples = count(v).filter(|&s| s > 0).ok_or_else(|| bad("a positive integer"))?,
            "index" => self.index = Some(count(v).ok_or_else(|| bad("a non-negative integer"))?),
            "tempered" => self.tempered = v.parse().map_err(|_| bad("true or false"))?,
            "alphabet_trim" => self.alphabet_trim = Some(count(v).ok_or_else(|| bad("a non-negative integer"))?),
            "support_size" => self.support_size = count(v).ok_or_else(|| bad("a non-negative integer"))?,
            "measure_steps" => self.measure_steps = count(v).ok_or_else(|| bad("a non-negative integer"))?,
            "candidates" => self.candidates = count(v).ok_or_else(|| bad("a non-negative integer"))?,
            "theta" => self.theta = v.parse().map_err(|_| bad("a number"))?,
            "powers" => self.powers = list(v, count).ok_or_else(|| bad("a comma-separated list of powers"))?,
            "budget" => self.budget = count(v).ok_or_else(|| bad("a non-negative integer"))?,
            _ => return Err(UsageError(format!("unknown setting `{key}`"))),
        }
        Ok(())
    }

    /// Plain `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| UsageError(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
            self.set(k, v)
                .map_err(|e| UsageError(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    /// Final checks, and the input file digest.
    pub fn finish(&mut self) -> Result<(), UsageError> {
        if self.n == 0 {
            return Err(UsageError("n must be positive".into()));
        }
        if self.levels.is_empty() {
            return Err(UsageError("level grid is empty".into()));
        }
        if let Some(p) = &self.input {
            self.input_sha256 = Some(digest(p)?);
        }
        if let Some(p) = self.system.trim().strip_prefix("file:") {
            self.system_sha256 = Some(digest(p)?);
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn start_point(&self) -> TorusPoint {
        match self.x0 {
            Some([x, y]) => TorusPoint::new(x, y),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                TorusPoint::new(rng.random(), rng.random())
            }
        }
    }
}

fn digest(path: &str) -> Result<String, UsageError> {
    let bytes = std::fs::read(path).map_err(|e| UsageError(format!("cannot read {path}: {e}")))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn positive(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite() && *v > 0.0)
}

/// Non-negative integer, also in float notation such as `1e5`.
fn count(s: &str) -> Option<usize> {
    if let Ok(v) = s.parse::<usize>() {
        return Some(v);
    }
    let v: f64 = s.parse().ok()?;
    (v >= 0.0 && v.fract() == 0.0 && v < 1e15).then_some(v as usize)
}

fn list<T>(s: &str, item: impl Fn(&str) -> Option<T>) -> Option<Vec<T>> {
    s.split(',').map(|p| item(p.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_accept_float_notation() {
        assert_eq!(count("1e5"), Some(100_000));
        assert_eq!(count("250"), Some(250));
        assert_eq!(count("2.5"), None);
        assert_eq!(count("-1"), None);
    }

    #[test]
    fn settings_override_defaults() {
        let mut c = RunConfig::defaults(Command::Analyze);
        c.set("eps", "0.05").unwrap();
        c.set("levels", "1, 2,8").unwrap();
        c.set("support-size", "0").unwrap();
        assert_eq!(c.epsilon, Some(0.05));
        assert_eq!(c.levels, vec![1.0, 2.0, 8.0]);
        assert_eq!(c.support_size, 0);
        assert!(c.set("bogus", "1").is_err());
        assert!(c.set("t", "0.5").is_err());
        c.set("n", "0").unwrap();
        assert!(c.finish().is_err());
    }

    #[test]
    fn hash_ignores_output_dir_but_not_seed() {
        let a = RunConfig::defaults(Command::Analyze);
        let mut b = a.clone();
        b.out = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn seeded_start_point_is_stable() {
        let a = RunConfig::defaults(Command::Analyze);
        assert_eq!(a.start_point(), a.start_point());
        let mut b = a.clone();
        b.seed = 9;
        assert_ne!(a.start_point(), b.start_point());
    }
}
