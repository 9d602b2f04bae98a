//! Flat `key=value` configuration files and layered resolution: command-line
//! flags override file values, which override the noise-derived defaults.
//! Unknown keys are errors.

use crate::error::{LtdlError, Result};
use crate::solver::LtdlConfig;

/// One configuration layer; `None` means "not set at this layer".
/// `k_clusters` is doubly optional: the outer level tracks presence, the
/// inner one encodes `auto`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartialConfig {
    pub d_l: Option<usize>,
    pub d_w: Option<usize>,
    pub p_l: Option<usize>,
    pub p_w: Option<usize>,
    pub tau_a: Option<f64>,
    pub tau_e: Option<f64>,
    pub lambda_s: Option<f64>,
    pub lambda_r: Option<f64>,
    pub rho0: Option<f64>,
    pub mu: Option<f64>,
    pub rho_cap: Option<f64>,
    pub max_outer_iters: Option<usize>,
    pub tol_residual: Option<f64>,
    pub k_clusters: Option<Option<usize>>,
    pub kmeans_max_iter: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub energy_frac: Option<f64>,
    pub hooi_max_iter: Option<usize>,
    pub hooi_tol: Option<f64>,
    pub dict_newton_iters: Option<usize>,
    pub dict_newton_tol: Option<f64>,
    pub dict_updates_per_iter: Option<usize>,
    pub seed: Option<u64>,
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| {
        LtdlError::Argument(format!("config key {key}: {value:?} is not a nonnegative integer"))
    })
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value.parse().map_err(|_| {
        LtdlError::Argument(format!("config key {key}: {value:?} is not a nonnegative integer"))
    })
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| LtdlError::Argument(format!("config key {key}: {value:?} is not a number")))
}

impl PartialConfig {
    /// Parses the flat `key=value` format. Blank lines and `#` comments are
    /// allowed; any unknown key is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                LtdlError::Argument(format!("config line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "d_l" => cfg.d_l = Some(parse_usize(key, value)?),
                "d_w" => cfg.d_w = Some(parse_usize(key, value)?),
                "p_l" => cfg.p_l = Some(parse_usize(key, value)?),
                "p_w" => cfg.p_w = Some(parse_usize(key, value)?),
                "tau_a" => cfg.tau_a = Some(parse_f64(key, value)?),
                "tau_e" => cfg.tau_e = Some(parse_f64(key, value)?),
                "lambda_s" => cfg.lambda_s = Some(parse_f64(key, value)?),
                "lambda_r" => cfg.lambda_r = Some(parse_f64(key, value)?),
                "rho0" => cfg.rho0 = Some(parse_f64(key, value)?),
                "mu" => cfg.mu = Some(parse_f64(key, value)?),
                "rho_cap" => cfg.rho_cap = Some(parse_f64(key, value)?),
                "max_outer_iters" => cfg.max_outer_iters = Some(parse_usize(key, value)?),
                "tol_residual" => cfg.tol_residual = Some(parse_f64(key, value)?),
                "k_clusters" => {
                    cfg.k_clusters = Some(if value == "auto" {
                        None
                    } else {
                        Some(parse_usize(key, value)?)
                    })
                }
                "kmeans_max_iter" => cfg.kmeans_max_iter = Some(parse_usize(key, value)?),
                "noise_sigma" => cfg.noise_sigma = Some(parse_f64(key, value)?),
                "energy_frac" => cfg.energy_frac = Some(parse_f64(key, value)?),
                "hooi_max_iter" => cfg.hooi_max_iter = Some(parse_usize(key, value)?),
                "hooi_tol" => cfg.hooi_tol = Some(parse_f64(key, value)?),
                "dict_newton_iters" => cfg.dict_newton_iters = Some(parse_usize(key, value)?),
                "dict_newton_tol" => cfg.dict_newton_tol = Some(parse_f64(key, value)?),
                "dict_updates_per_iter" => {
                    cfg.dict_updates_per_iter = Some(parse_usize(key, value)?)
                }
                "seed" => cfg.seed = Some(parse_u64(key, value)?),
                other => {
                    return Err(LtdlError::Argument(format!(
                        "config line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(cfg)
    }

    /// Fields set in `self` win over `lower`.
    pub fn merged_over(&self, lower: &PartialConfig) -> PartialConfig {
        macro_rules! pick {
            ($field:ident) => {
                self.$field.clone().or_else(|| lower.$field.clone())
            };
        }
        PartialConfig {
            d_l: pick!(d_l),
            d_w: pick!(d_w),
            p_l: pick!(p_l),
            p_w: pick!(p_w),
            tau_a: pick!(tau_a),
            tau_e: pick!(tau_e),
            lambda_s: pick!(lambda_s),
            lambda_r: pick!(lambda_r),
            rho0: pick!(rho0),
            mu: pick!(mu),
            rho_cap: pick!(rho_cap),
            max_outer_iters: pick!(max_outer_iters),
            tol_residual: pick!(tol_residual),
            k_clusters: pick!(k_clusters),
            kmeans_max_iter: pick!(kmeans_max_iter),
            noise_sigma: pick!(noise_sigma),
            energy_frac: pick!(energy_frac),
            hooi_max_iter: pick!(hooi_max_iter),
            hooi_tol: pick!(hooi_tol),
            dict_newton_iters: pick!(dict_newton_iters),
            dict_newton_tol: pick!(dict_newton_tol),
            dict_updates_per_iter: pick!(dict_updates_per_iter),
            seed: pick!(seed),
        }
    }

    /// Resolves into a full config. The noise level comes from this layer
    /// stack if set, otherwise from `fallback_sigma` (a CLI flag or an
    /// estimate); `lambda_s`/`lambda_r` default to their noise-derived
    /// values unless set explicitly.
    pub fn resolve(&self, fallback_sigma: f64) -> Result<LtdlConfig> {
        let sigma = self.noise_sigma.unwrap_or(fallback_sigma);
        let mut cfg = LtdlConfig::for_noise(sigma);
        macro_rules! apply {
            ($field:ident) => {
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            };
        }
        apply!(d_l);
        apply!(d_w);
        apply!(p_l);
        apply!(p_w);
        apply!(tau_a);
        apply!(tau_e);
        apply!(lambda_s);
        apply!(lambda_r);
        apply!(rho0);
        apply!(mu);
        apply!(rho_cap);
        apply!(max_outer_iters);
        apply!(tol_residual);
        apply!(k_clusters);
        apply!(kmeans_max_iter);
        apply!(energy_frac);
        apply!(hooi_max_iter);
        apply!(hooi_tol);
        apply!(dict_newton_iters);
        apply!(dict_newton_tol);
        apply!(dict_updates_per_iter);
        apply!(seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_every_key_and_rejects_unknown_ones() {
        let text = "\
# full example
d_l = 5
d_w=5
p_l = 2
p_w = 2
tau_a = 1.25
tau_e = 1.25
lambda_s = 0.02
lambda_r = 10
rho0 = 0.05
mu = 1.2
rho_cap = 1e5
max_outer_iters = 12
tol_residual = 1e-3
k_clusters = 4
kmeans_max_iter = 40
noise_sigma = 0.07
energy_frac = 0.95
hooi_max_iter = 20
hooi_tol = 1e-5
dict_newton_iters = 25
dict_newton_tol = 1e-11
dict_updates_per_iter = 2
seed = 9
";
        let partial = PartialConfig::parse(text).unwrap();
        let cfg = partial.resolve(0.0).unwrap();
        assert_eq!(cfg.d_l, 5);
        assert_eq!(cfg.k_clusters, Some(4));
        assert_eq!(cfg.noise_sigma, 0.07);
        assert_eq!(cfg.lambda_s, 0.02);
        assert_eq!(cfg.seed, 9);

        assert!(PartialConfig::parse("bogus_key = 1").is_err());
        assert!(PartialConfig::parse("no equals sign").is_err());
        assert!(PartialConfig::parse("mu = fast").is_err());
    }

    #[test]
    fn auto_clusters_parse() {
        let partial = PartialConfig::parse("k_clusters = auto").unwrap();
        assert_eq!(partial.k_clusters, Some(None));
        let cfg = partial.resolve(0.1).unwrap();
        assert_eq!(cfg.k_clusters, None);
    }

    #[test]
    fn noise_derived_defaults_unless_overridden() {
        let cfg = PartialConfig::default().resolve(0.2).unwrap();
        assert!((cfg.lambda_s - 0.02).abs() < 1e-15);
        assert!((cfg.lambda_r - 100.0).abs() < 1e-12);

        let partial = PartialConfig::parse("noise_sigma = 0.1\nlambda_r = 7").unwrap();
        let cfg = partial.resolve(0.4).unwrap();
        assert_eq!(cfg.noise_sigma, 0.1);
        assert!((cfg.lambda_s - 0.01).abs() < 1e-15);
        assert_eq!(cfg.lambda_r, 7.0);
    }

    #[test]
    fn resolution_validates() {
        let partial = PartialConfig::parse("mu = 0.9").unwrap();
        assert!(partial.resolve(0.1).is_err());
    }

    /// Field-by-field precedence: flag > file > default.
    #[derive(Debug, Clone, Copy)]
    enum Layering {
        Neither,
        FileOnly,
        FlagOnly,
        Both,
    }

    fn layering_strategy() -> impl Strategy<Value = Layering> {
        prop_oneof![
            Just(Layering::Neither),
            Just(Layering::FileOnly),
            Just(Layering::FlagOnly),
            Just(Layering::Both),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn precedence_is_flag_over_file_over_default(
            layers in proptest::collection::vec(layering_strategy(), 23)
        ) {
            // Distinct, valid values per layer for every field, written as
            // key=value text so the parser participates too.
            let keys = [
                ("d_l", "6", "8"),
                ("d_w", "6", "8"),
                ("p_l", "2", "3"),
                ("p_w", "2", "3"),
                ("tau_a", "1.25", "1.75"),
                ("tau_e", "1.25", "1.75"),
                ("lambda_s", "0.5", "0.25"),
                ("lambda_r", "12", "24"),
                ("rho0", "0.05", "0.5"),
                ("mu", "1.2", "1.4"),
                ("rho_cap", "1e4", "1e5"),
                ("max_outer_iters", "11", "22"),
                ("tol_residual", "1e-3", "1e-5"),
                ("k_clusters", "4", "auto"),
                ("kmeans_max_iter", "33", "44"),
                ("noise_sigma", "0.07", "0.21"),
                ("energy_frac", "0.9", "0.97"),
                ("hooi_max_iter", "13", "26"),
                ("hooi_tol", "1e-4", "1e-7"),
                ("dict_newton_iters", "21", "42"),
                ("dict_newton_tol", "1e-9", "1e-13"),
                ("dict_updates_per_iter", "2", "3"),
                ("seed", "5", "10"),
            ];
            let mut file_text = String::new();
            let mut flag_text = String::new();
            for ((key, file_v, flag_v), layer) in keys.iter().zip(&layers) {
                match layer {
                    Layering::Neither => {}
                    Layering::FileOnly => file_text.push_str(&format!("{key} = {file_v}\n")),
                    Layering::FlagOnly => flag_text.push_str(&format!("{key} = {flag_v}\n")),
                    Layering::Both => {
                        file_text.push_str(&format!("{key} = {file_v}\n"));
                        flag_text.push_str(&format!("{key} = {flag_v}\n"));
                    }
                }
            }
            let file_layer = PartialConfig::parse(&file_text).unwrap();
            let flag_layer = PartialConfig::parse(&flag_text).unwrap();
            let merged = flag_layer.merged_over(&file_layer);
            let fallback = 0.1;
            let resolved = merged.resolve(fallback).unwrap();
            let defaults = LtdlConfig::for_noise(
                merged.noise_sigma.unwrap_or(fallback),
            );

            macro_rules! check {
                ($idx:expr, $field:ident, $parse:expr) => {{
                    let (_, file_v, flag_v) = keys[$idx];
                    let expected = match layers[$idx] {
                        Layering::Neither => defaults.$field.clone(),
                        Layering::FileOnly => $parse(file_v),
                        Layering::FlagOnly | Layering::Both => $parse(flag_v),
                    };
                    prop_assert_eq!(resolved.$field.clone(), expected);
                }};
            }
            check!(0, d_l, |v: &str| v.parse::<usize>().unwrap());
            check!(1, d_w, |v: &str| v.parse::<usize>().unwrap());
            check!(2, p_l, |v: &str| v.parse::<usize>().unwrap());
            check!(3, p_w, |v: &str| v.parse::<usize>().unwrap());
            check!(4, tau_a, |v: &str| v.parse::<f64>().unwrap());
            check!(5, tau_e, |v: &str| v.parse::<f64>().unwrap());
            check!(6, lambda_s, |v: &str| v.parse::<f64>().unwrap());
            check!(7, lambda_r, |v: &str| v.parse::<f64>().unwrap());
            check!(8, rho0, |v: &str| v.parse::<f64>().unwrap());
            check!(9, mu, |v: &str| v.parse::<f64>().unwrap());
            check!(10, rho_cap, |v: &str| v.parse::<f64>().unwrap());
            check!(11, max_outer_iters, |v: &str| v.parse::<usize>().unwrap());
            check!(12, tol_residual, |v: &str| v.parse::<f64>().unwrap());
            check!(13, k_clusters, |v: &str| if v == "auto" { None } else { Some(v.parse::<usize>().unwrap()) });
            check!(14, kmeans_max_iter, |v: &str| v.parse::<usize>().unwrap());
            check!(15, noise_sigma, |v: &str| v.parse::<f64>().unwrap());
            check!(16, energy_frac, |v: &str| v.parse::<f64>().unwrap());
            check!(17, hooi_max_iter, |v: &str| v.parse::<usize>().unwrap());
            check!(18, hooi_tol, |v: &str| v.parse::<f64>().unwrap());
            check!(19, dict_newton_iters, |v: &str| v.parse::<usize>().unwrap());
            check!(20, dict_newton_tol, |v: &str| v.parse::<f64>().unwrap());
            check!(21, dict_updates_per_iter, |v: &str| v.parse::<usize>().unwrap());
            check!(22, seed, |v: &str| v.parse::<u64>().unwrap());
        }
    }
}
