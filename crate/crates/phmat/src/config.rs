//! Experiment configuration: a `key = value` text format plus overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use phmat_core::kernels::{Interval, KernelFamily, KernelSpec};
use phmat_core::phmatrix::{BuildConfig, NearMode};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ParamH,
    ParamH2,
    HAca,
    H2Hca,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::ParamH, Method::ParamH2, Method::HAca, Method::H2Hca];

    pub fn id(self) -> &'static str {
        match self {
            Method::ParamH => "param-h",
            Method::ParamH2 => "param-h2",
            Method::HAca => "h-aca",
            Method::H2Hca => "h2-hca",
        }
    }

    pub fn from_id(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.id() == s)
    }

    pub fn is_parametric(self) -> bool {
        matches!(self, Method::ParamH | Method::ParamH2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kernel: KernelFamily,
    pub n: usize,
    pub d: usize,
    pub l_max: usize,
    pub p_s: usize,
    pub p_theta: usize,
    pub eps: f64,
    /// Defaults to sqrt(d).
    pub eta: Option<f64>,
    /// Defaults to the kernel's standard box.
    pub theta_box: Option<Vec<Interval>>,
    pub method: Method,
    pub seed: u64,
    pub near_mode: NearMode,
    pub use_cache: bool,
    pub r_max_far: usize,
    pub r_max_near: usize,
    /// Parameter samples for error and timing.
    pub n_theta: usize,
    /// Size of the row subset J.
    pub n_rows: usize,
    /// Repetitions per online instantiation; the median is reported.
    pub repeats: usize,
    pub out: Option<PathBuf>,
    pub json: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kernel: KernelFamily::Se,
            n: 4096,
            d: 3,
            l_max: 2,
            p_s: 15,
            p_theta: 27,
            eps: 1e-5,
            eta: None,
            theta_box: None,
            method: Method::ParamH,
            seed: 7,
            near_mode: NearMode::Tt,
            use_cache: true,
            r_max_far: 300,
            r_max_near: 150,
            n_theta: 30,
            n_rows: 200,
            repeats: 3,
            out: None,
            json: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| config_err(key, format!("cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        v => Err(config_err(key, format!("expected a boolean, got '{v}'"))),
    }
}

/// `lo:hi` intervals separated by commas, e.g. `0.25:1,0.5:3`.
pub fn parse_box(key: &str, value: &str) -> Result<Vec<Interval>> {
    value
        .split(',')
        .map(|part| {
            let (lo, hi) = part
                .split_once(':')
                .ok_or_else(|| config_err(key, format!("expected lo:hi, got '{part}'")))?;
            Ok(Interval::new(parse(key, lo)?, parse(key, hi)?))
        })
        .collect()
}

/// Lines of `key = value`; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(&format!("line {}", lineno + 1), "expected 'key = value'"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        for (k, v) in parse_kv(&text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "kernel" => self.kernel = KernelFamily::from_id(v).map_err(|e| config_err(key, e.to_string()))?,
            "n" => self.n = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "lmax" | "l_max" => self.l_max = parse(key, v)?,
            "ps" | "p_s" => self.p_s = parse(key, v)?,
            "ptheta" | "p_theta" => self.p_theta = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "eta" => self.eta = if v == "auto" { None } else { Some(parse(key, v)?) },
            "theta_box" => self.theta_box = if v == "default" { None } else { Some(parse_box(key, v)?) },
            "method" => {
                self.method = Method::from_id(v).ok_or_else(|| config_err(key, format!("unknown method '{v}'")))?
            }
            "seed" => self.seed = parse(key, v)?,
            "near_mode" => self.near_mode = NearMode::from_id(v).map_err(|e| config_err(key, e.to_string()))?,
            "cache" | "use_cache" => self.use_cache = parse_bool(key, v)?,
            "r_max_far" => self.r_max_far = parse(key, v)?,
            "r_max_near" => self.r_max_near = parse(key, v)?,
            "n_theta" => self.n_theta = parse(key, v)?,
            "n_rows" => self.n_rows = parse(key, v)?,
            "repeats" => self.repeats = parse(key, v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            "json" => self.json = Some(PathBuf::from(v)),
            _ => return Err(config_err(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n", self.n),
            ("d", self.d),
            ("p_s", self.p_s),
            ("p_theta", self.p_theta),
            ("r_max_far", self.r_max_far),
            ("r_max_near", self.r_max_near),
            ("n_theta", self.n_theta),
            ("n_rows", self.n_rows),
            ("repeats", self.repeats),
        ];
        for (f, v) in positive {
            if v == 0 {
                return Err(config_err(f, "must be positive"));
            }
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(config_err("eps", "must lie in (0, 1)"));
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0) {
                return Err(config_err("eta", "must be positive"));
            }
        }
        if self.d * self.l_max >= 40 {
            return Err(config_err("l_max", "tree too deep for this dimension"));
        }
        self.kernel_spec()?;
        Ok(())
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        match &self.theta_box {
            None => Ok(KernelSpec::with_default_box(self.kernel)),
            Some(b) => KernelSpec::new(self.kernel, b.clone()).map_err(|e| config_err("theta_box", e.to_string())),
        }
    }

    pub fn build_config(&self) -> BuildConfig {
        BuildConfig {
            l_max: self.l_max,
            p_s: self.p_s,
            p_theta: self.p_theta,
            eps: self.eps,
            eta: self.eta.unwrap_or_else(|| (self.d as f64).sqrt()),
            seed: self.seed,
            near_mode: self.near_mode,
            use_cache: self.use_cache,
            r_max_far: self.r_max_far,
            r_max_near: self.r_max_near,
            root_box: None,
        }
    }

    /// Resolved configuration in the same format `from_file` reads.
    pub fn to_kv(&self) -> String {
        let spec = self.kernel_spec().unwrap_or_else(|_| KernelSpec::with_default_box(self.kernel));
        let boxes: Vec<String> = spec.theta_box.iter().map(|iv| format!("{}:{}", iv.lo, iv.hi)).collect();
        let mut s = String::new();
        let _ = writeln!(s, "kernel = {}", self.kernel.id());
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "l_max = {}", self.l_max);
        let _ = writeln!(s, "p_s = {}", self.p_s);
        let _ = writeln!(s, "p_theta = {}", self.p_theta);
        let _ = writeln!(s, "eps = {:e}", self.eps);
        let _ = writeln!(s, "eta = {}", self.build_config().eta);
        let _ = writeln!(s, "theta_box = {}", boxes.join(","));
        let _ = writeln!(s, "method = {}", self.method.id());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "near_mode = {}", self.near_mode.id());
        let _ = writeln!(s, "use_cache = {}", self.use_cache);
        let _ = writeln!(s, "r_max_far = {}", self.r_max_far);
        let _ = writeln!(s, "r_max_near = {}", self.r_max_near);
        let _ = writeln!(s, "n_theta = {}", self.n_theta);
        let _ = writeln!(s, "n_rows = {}", self.n_rows);
        let _ = writeln!(s, "repeats = {}", self.repeats);
        if let Some(p) = &self.out {
            let _ = writeln!(s, "out = {}", p.display());
        }
        if let Some(p) = &self.json {
            let _ = writeln!(s, "json = {}", p.display());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_through_text() {
        let mut c = ExperimentConfig::default();
        c.set("kernel", "mn").unwrap();
        c.set("theta_box", "0.3:0.9,1:2").unwrap();
        c.set("method", "h2-hca").unwrap();
        c.set("eps", "1e-6").unwrap();
        let mut back = ExperimentConfig::default();
        for (k, v) in parse_kv(&c.to_kv()).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back.kernel, c.kernel);
        assert_eq!(back.theta_box, c.theta_box);
        assert_eq!(back.method, c.method);
        assert_eq!(back.eps, c.eps);
        assert_eq!(back.eta, Some(3f64.sqrt()));
    }

    #[test]
    fn errors_name_the_field() {
        let mut c = ExperimentConfig::default();
        let e = c.set("n", "many").unwrap_err().to_string();
        assert!(e.contains("'n'"), "{e}");
        assert!(c.set("bogus", "1").unwrap_err().to_string().contains("bogus"));
        c.n = 0;
        assert!(c.validate().unwrap_err().to_string().contains("'n'"));
        let mut c = ExperimentConfig::default();
        c.theta_box = Some(vec![Interval::new(0.5, 1.0)]);
        c.kernel = KernelFamily::Mn;
        assert!(c.validate().unwrap_err().to_string().contains("theta_box"));
    }

    #[test]
    fn comments_and_blank_lines() {
        let kv = parse_kv("# header\n\nn = 512  # small\n d=2\n").unwrap();
        assert_eq!(kv, vec![("n".into(), "512".into()), ("d".into(), "2".into())]);
        assert!(parse_kv("n 512").is_err());
    }
    proptest! {
        #[test]
        fn text_round_trip_preserves_everything(
            k in 0usize..5,
            n in 1usize..100_000,
            d in 1usize..4,
            l_max in 0usize..6,
            p_s in 2usize..20,
            eps in 1e-9f64..0.5,
            lo in 0.1f64..1.0,
            width in 0.01f64..2.0,
            m in 0usize..4,
            seed: u64,
            cache: bool,
        ) {
            let mut c = ExperimentConfig {
                kernel: KernelFamily::ALL[k],
                n, d, l_max, p_s, eps, seed,
                method: [Method::ParamH, Method::ParamH2, Method::HAca, Method::H2Hca][m],
                use_cache: cache,
                ..ExperimentConfig::default()
            };
            let mut b = vec![Interval::new(lo, lo + width)];
            if c.kernel == KernelFamily::Mn {
                b.push(Interval::new(0.5 + lo, 1.5 + lo + width));
            }
            c.theta_box = Some(b);
            let mut back = ExperimentConfig::default();
            for (key, v) in parse_kv(&c.to_kv()).unwrap() {
                back.set(&key, &v).unwrap();
            }
            prop_assert_eq!(back.build_config(), c.build_config());
            prop_assert_eq!(back.kernel_spec().unwrap(), c.kernel_spec().unwrap());
            prop_assert_eq!(back.method, c.method);
            prop_assert_eq!((back.n, back.d, back.n_theta, back.n_rows), (c.n, c.d, c.n_theta, c.n_rows));
        }
    }
}
