//! Settings resolution: built-in defaults, then the config file, then flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rsgm::detect::DetectConfig;
use rsgm::sgm::{PathCount, PathSet, SgmParams};
use rsgm::temporal::{FilterConfig, NoiseParams, RangeMode};
use serde::Deserialize;

/// Flat `key = value` file; `#` starts a comment. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub q: Option<f64>,
    pub r: Option<f64>,
    pub p_init: Option<f64>,
    pub disc_thresh: Option<f64>,
    pub min_range_halfwidth: Option<u16>,
    /// Search half-width in standard deviations instead of the variance.
    pub range_k: Option<f64>,
    pub p1: Option<u16>,
    pub p2: Option<u16>,
    pub paths: Option<u8>,
    pub path_set: Option<String>,
    pub d_max: Option<usize>,
    pub score_thresh: Option<f64>,
    pub merge_stop_iou: Option<f64>,
    pub min_box_area: Option<usize>,
    pub threads: Option<usize>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("bad config {}", path.display()))
    }

    /// `other`'s keys win.
    pub fn overlay(self, other: ConfigFile) -> ConfigFile {
        macro_rules! pick {
            ($($f:ident),*) => { ConfigFile { $($f: other.$f.or(self.$f)),* } };
        }
        pick!(
            q,
            r,
            p_init,
            disc_thresh,
            min_range_halfwidth,
            range_k,
            p1,
            p2,
            paths,
            path_set,
            d_max,
            score_thresh,
            merge_stop_iou,
            min_box_area,
            threads
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub params: SgmParams,
    pub filter: FilterConfig,
    pub detect: DetectConfig,
    pub threads: Option<usize>,
}

pub fn parse_path_set(s: &str) -> Result<PathSet> {
    match s {
        "nondiag" => Ok(PathSet::NonDiagonal),
        "diag" => Ok(PathSet::Diagonal),
        other => bail!("path_set must be nondiag or diag, got {other:?}"),
    }
}

impl Settings {
    pub fn resolve(c: &ConfigFile) -> Result<Self> {
        let mut params = SgmParams::default();
        if let Some(d) = c.d_max {
            params.d_max = d;
        }
        if let Some(p) = c.p1 {
            params.p1 = p;
        }
        if let Some(p) = c.p2 {
            params.p2 = p;
        }
        if let Some(n) = c.paths {
            params.paths = match n {
                4 => PathCount::Four,
                8 => PathCount::Eight,
                other => bail!("paths must be 4 or 8, got {other}"),
            };
        }
        if let Some(s) = &c.path_set {
            params.path_set = parse_path_set(s)?;
        }
        params.validate()?;

        let mut filter = FilterConfig::for_d_max(params.d_max);
        filter.noise = NoiseParams {
            q: c.q.unwrap_or(filter.noise.q),
            r: c.r.unwrap_or(filter.noise.r),
        };
        if let Some(v) = c.p_init {
            filter.p_init = v;
        }
        if let Some(v) = c.disc_thresh {
            filter.disc_thresh = v;
        }
        if let Some(v) = c.min_range_halfwidth {
            filter.min_range_halfwidth = v;
        }
        if let Some(k) = c.range_k {
            filter.range_mode = RangeMode::StdDev { k };
        }
        filter.validate(params.d_max)?;

        let mut detect = DetectConfig::default();
        if let Some(v) = c.score_thresh {
            detect.score_thresh = v;
        }
        if let Some(v) = c.merge_stop_iou {
            detect.merge_stop_iou = v;
        }
        if let Some(v) = c.min_box_area {
            detect.min_box_area = v;
        }
        detect.validate()?;

        if c.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        Ok(Self {
            params,
            filter,
            detect,
            threads: c.threads,
        })
    }
}
