//! Pipeline configuration: JSON file, speed-up dependent defaults and
//! dotted-path overrides.

use std::path::Path;

use hyperlapse::content::{SALIENCY_WINDOW, SIGMA_S};
use hyperlapse::foe::FoeParams;
use hyperlapse::frameselect::FrameSelectParams;
use hyperlapse::motion::RansacParams;
use hyperlapse::render::{FrameFormat, ZoomParams};
use hyperlapse::stab2d::Stab2dParams;
use hyperlapse::stab360::Stab360Params;
use hyperlapse::tracking::TrackerParams;
use hyperlapse::viewplan::PlanParams;
use hyperlapse::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoeStage {
    #[serde(flatten)]
    pub params: FoeParams,
    /// Temporal smoothing of the FOE track, frames.
    pub sigma: f64,
    /// Estimate on every `frame_stride`-th frame only.
    pub frame_stride: usize,
}

impl Default for FoeStage {
    fn default() -> Self {
        Self {
            params: FoeParams::default(),
            sigma: 10.0,
            frame_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContentStage {
    pub sigma_s: f64,
    /// Saliency window, frames.
    pub window: usize,
    pub subsequence: usize,
    pub rois_per_subsequence: usize,
    /// Grid segmentation used when no region maps are supplied.
    pub fallback_block: usize,
    pub fallback_span: usize,
}

impl Default for ContentStage {
    fn default() -> Self {
        Self {
            sigma_s: SIGMA_S,
            window: SALIENCY_WINDOW,
            subsequence: 2000,
            rois_per_subsequence: 3,
            fallback_block: 64,
            fallback_span: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderStage {
    pub width: usize,
    pub height: usize,
    pub format: FrameFormat,
    /// Also write the rotation-stabilized panoramas.
    pub write_stabilized: bool,
}

impl Default for RenderStage {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            format: FrameFormat::Png,
            write_stabilized: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Target speed-up; sets the default temporal widths of planning and
    /// selection.
    pub speedup: f64,
    /// Seeds every randomized step.
    pub seed: u64,
    /// Semantic classes the camera should follow, by name. When unset the
    /// label with the highest summed saliency is used.
    pub labels: Option<Vec<String>>,
    /// Tracking on the panorama when no `tracks.csv` is supplied.
    pub panorama_tracker: TrackerParams,
    pub stab360: Stab360Params,
    pub foe: FoeStage,
    pub content: ContentStage,
    pub plan: PlanParams,
    pub select: FrameSelectParams,
    pub zoom: ZoomParams,
    /// Tracking on the rendered frames for 2D stabilization.
    pub nfov_tracker: TrackerParams,
    pub ransac: RansacParams,
    pub stab2d: Stab2dParams,
    pub render: RenderStage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::for_speedup(8.0)
    }
}

impl PipelineConfig {
    pub fn for_speedup(speedup: f64) -> Self {
        Self {
            speedup,
            seed: 0,
            labels: None,
            panorama_tracker: TrackerParams {
                panoramic: true,
                ..Default::default()
            },
            stab360: Stab360Params::default(),
            foe: FoeStage::default(),
            content: ContentStage::default(),
            plan: PlanParams::for_speedup(speedup),
            select: FrameSelectParams::for_speedup(speedup),
            zoom: ZoomParams::default(),
            nfov_tracker: TrackerParams::default(),
            ransac: RansacParams::default(),
            stab2d: Stab2dParams::default(),
            render: RenderStage::default(),
        }
    }

    /// Builds a config from an optional JSON document plus `path=value`
    /// overrides. Fields left out take the defaults for the effective
    /// speed-up.
    pub fn from_sources(json: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut user = match json {
            Some(s) => serde_json::from_str::<Value>(s)?,
            None => Value::Object(Map::new()),
        };
        if !user.is_object() {
            return Err(Error::InvalidParameter("config must be a JSON object".into()));
        }
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let speedup = match user.get("speedup") {
            None => 8.0,
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::InvalidParameter("speedup must be a number".into()))?,
        };
        if !(speedup >= 1.0) || !speedup.is_finite() {
            return Err(Error::InvalidParameter("speedup must be >= 1".into()));
        }
        let mut merged = serde_json::to_value(Self::for_speedup(speedup))?;
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = file.map(std::fs::read_to_string).transpose()?;
        Self::from_sources(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        self.plan.validate()?;
        self.select.validate()?;
        self.zoom.validate()?;
        self.stab2d.validate()?;
        if !(self.stab360.sigma >= 0.0) || !(self.foe.sigma >= 0.0) {
            return bad("smoothing widths must be nonnegative");
        }
        if self.foe.frame_stride == 0 || self.foe.params.steps == 0 || self.foe.params.stride == 0 {
            return bad("foe steps and strides must be positive");
        }
        let c = &self.content;
        if !(c.sigma_s > 0.0) || c.window == 0 || c.subsequence == 0 || c.rois_per_subsequence == 0 {
            return bad("content sigma_s, window, subsequence and rois_per_subsequence must be positive");
        }
        if c.fallback_block == 0 || c.fallback_span == 0 {
            return bad("fallback block and span must be positive");
        }
        if self.render.width < 16 || self.render.height < 16 {
            return bad("render size must be at least 16x16");
        }
        if self.ransac.iterations == 0 || !(self.ransac.inlier_threshold > 0.0) {
            return bad("ransac needs iterations and a positive threshold");
        }
        Ok(())
    }
}

/// `base` with a JSON document and `path=value` overrides laid over it.
pub fn layered<T: Serialize + DeserializeOwned>(base: &T, json: Option<&str>, overrides: &[String]) -> Result<T> {
    let mut user = match json {
        Some(s) => serde_json::from_str::<Value>(s)?,
        None => Value::Object(Map::new()),
    };
    for o in overrides {
        apply_override(&mut user, o)?;
    }
    let mut merged = serde_json::to_value(base)?;
    merge(&mut merged, user);
    Ok(serde_json::from_value(merged)?)
}

/// Recursively overlays `over` onto `base`; objects merge key by key, other
/// values replace.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`; the value is parsed as JSON, or taken as a string when
/// that fails.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidParameter(format!("override `{spec}` is not path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::InvalidParameter(format!("bad override path `{path}`")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut cur = doc;
    for (i, k) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::InvalidParameter(format!("override `{path}` descends into a non-object")))?;
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("path has at least one key")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_speedup() {
        let c = PipelineConfig::from_sources(Some(r#"{"speedup": 4}"#), &[]).unwrap();
        assert_eq!(c.plan.sigma_t, 40.0);
        assert_eq!(c.select.target_speedup, 4.0);
        assert_eq!(c.select.window(), 8);
        let d = PipelineConfig::from_sources(None, &[]).unwrap();
        assert_eq!(d, PipelineConfig::default());
        assert_eq!(d.stab2d.lambda, 2.0);
        assert_eq!(d.content.sigma_s, 0.04);
    }

    #[test]
    fn overrides_win() {
        let c = PipelineConfig::from_sources(
            Some(r#"{"plan": {"w_r": 3.0}, "seed": 5}"#),
            &[
                "plan.sigma_t=12".into(),
                "labels=[\"person\"]".into(),
                "speedup=10".into(),
                "render.format=ppm".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.plan.w_r, 3.0);
        assert_eq!(c.plan.sigma_t, 12.0);
        assert_eq!(c.select.target_speedup, 10.0);
        assert_eq!(c.labels, Some(vec!["person".to_string()]));
        assert_eq!(c.render.format, FrameFormat::Ppm);
        assert_eq!(c.seed, 5);
        let f = PipelineConfig::from_sources(None, &["foe.steps=360".into()]).unwrap();
        assert_eq!(f.foe.params.steps, 360);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(PipelineConfig::from_sources(Some("[1]"), &[]).is_err());
        assert!(PipelineConfig::from_sources(Some("{"), &[]).is_err());
        assert!(PipelineConfig::from_sources(None, &["nonsense".into()]).is_err());
        assert!(PipelineConfig::from_sources(None, &["speedup=0.5".into()]).is_err());
        assert!(PipelineConfig::from_sources(None, &["zoom.min_fov=120".into()]).is_err());
        assert!(PipelineConfig::from_sources(None, &["bogus=1".into()]).is_err());
        assert!(PipelineConfig::from_sources(None, &["seed.x=1".into()]).is_err());
    }

    #[test]
    fn config_roundtrips_through_json() {
        let c = PipelineConfig::from_sources(None, &["speedup=6".into(), "plan.cg_max_iterations=50".into()]).unwrap();
        let s = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(PipelineConfig::from_sources(Some(&s), &[]).unwrap(), c);
    }

    fn schema_keys(schema: &Value, root: &Value, prefix: &str, out: &mut Vec<String>) {
        let schema = match schema.get("$ref").and_then(Value::as_str) {
            Some(r) => root.pointer(r.trim_start_matches('#')).unwrap(),
            None => schema,
        };
        if let Some(props) = schema.get("properties").and_then(Value::as_object) {
            for (k, v) in props {
                let path = format!("{prefix}{k}");
                out.push(path.clone());
                schema_keys(v, root, &format!("{path}."), out);
            }
        }
    }

    fn value_keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
        if let Some(obj) = v.as_object() {
            for (k, v) in obj {
                let path = format!("{prefix}{k}");
                out.push(path.clone());
                value_keys(v, &format!("{path}."), out);
            }
        }
    }

    #[test]
    fn shipped_docs_match_the_code() {
        let docs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs");
        let shipped = std::fs::read_to_string(docs.join("config.default.json")).unwrap();
        assert_eq!(
            PipelineConfig::from_sources(Some(&shipped), &[]).unwrap(),
            PipelineConfig::default()
        );
        let schema: Value = serde_json::from_str(&std::fs::read_to_string(docs.join("config.schema.json")).unwrap()).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        schema_keys(&schema, &schema, "", &mut a);
        value_keys(&serde_json::to_value(PipelineConfig::default()).unwrap(), "", &mut b);
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }
}
