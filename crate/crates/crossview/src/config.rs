//! Flat `key = value` run configuration.
//!
//! Every key has a default taken from the core crate; a file may set any
//! subset, `#` starts a comment, and unknown keys are rejected. Command-line
//! flags are applied after the file through the same [`RunConfig::set`]
//! path, so they always win.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crossview_core::model::{CrossViewConfig, TransformKind};
use crossview_core::synth::SynthConfig;
use crossview_core::train::TrainConfig;
use crossview_core::viz::{RenderSpec, Rgb};

use crate::error::{Error, Result};

/// Environment variable naming a config file when `--config` is absent.
pub const CONFIG_ENV: &str = "CROSSVIEW_CONFIG";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: CrossViewConfig,
    pub model_seed: u64,
    pub synth: SynthConfig,
    pub data_seed: u64,
    pub scenes: usize,
    pub train: TrainConfig,
    /// Optimizer steps of direct aerial finetuning.
    pub finetune_steps: usize,
    /// Labeled aerial images used by `finetune`.
    pub finetune_images: usize,
    /// Side of the square geocalibration offset grid.
    pub geocal_grid: usize,
    /// Spacing of geocalibration offsets in pixels.
    pub geocal_step: i64,
    pub render: RenderSpec,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: CrossViewConfig::desk(),
            model_seed: 0,
            synth: SynthConfig::default(),
            data_seed: 0,
            scenes: 512,
            train: TrainConfig::default(),
            finetune_steps: 200,
            finetune_images: 4,
            geocal_grid: 5,
            geocal_step: 4,
            render: RenderSpec {
                scale: 8,
                ..RenderSpec::default()
            },
            threads: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s)).collect()
}

fn pair<T: FromStr + Copy>(key: &str, v: &str) -> Result<(T, T)> {
    match list::<T>(key, v)?.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => Err(Error::Config(format!("{key}: expected two comma-separated values, got '{v}'"))),
    }
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn palette(key: &str, v: &str) -> Result<Vec<Rgb>> {
    v.split(';')
        .map(|c| {
            let rgb: Vec<u8> = list(key, c)?;
            <[u8; 3]>::try_from(rgb).map_err(|_| Error::Config(format!("{key}: colors are r,g,b triples separated by ';'")))
        })
        .collect()
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let s = &mut self.synth;
        let t = &mut self.train;
        match key {
            "model.h_a" => (m.h_a, s.h_a) = (parse(key, v)?, parse(key, v)?),
            "model.w_a" => (m.w_a, s.w_a) = (parse(key, v)?, parse(key, v)?),
            "model.h_g" => (m.h_g, s.h_g) = (parse(key, v)?, parse(key, v)?),
            "model.w_g" => (m.w_g, s.w_g) = (parse(key, v)?, parse(key, v)?),
            "model.image_size" => (m.backbone.input_size, s.image_size) = (parse(key, v)?, parse(key, v)?),
            "model.classes" => m.classes = parse(key, v)?,
            "model.d_s" => m.d_s = parse(key, v)?,
            "model.backbone" => m.backbone.stage_channels = list(key, v)?,
            "model.taps" => m.backbone.taps = list(key, v)?,
            "model.head" => m.head_widths = list(key, v)?,
            "model.s_channels" => m.s_channels = list(key, v)?,
            "model.f_widths" => m.f_widths = list(key, v)?,
            "model.transform" => {
                m.transform = match v {
                    "adaptive" => TransformKind::Adaptive,
                    "naive" => TransformKind::Naive,
                    _ => return Err(Error::Config(format!("{key}: expected adaptive or naive, got '{v}'"))),
                }
            }
            "model.seed" => self.model_seed = parse(key, v)?,
            "synth.north_col" => s.north_col = parse(key, v)?,
            "synth.camera_height" => s.camera_height = parse(key, v)?,
            "synth.elev_min" => s.elev_min = parse(key, v)?,
            "synth.elev_max" => s.elev_max = parse(key, v)?,
            "synth.view_radius" => s.view_radius = parse(key, v)?,
            "synth.roads" => s.roads = pair(key, v)?,
            "synth.buildings" => s.buildings = pair(key, v)?,
            "synth.vegetation" => s.vegetation = pair(key, v)?,
            "synth.road_width" => s.road_width = pair(key, v)?,
            "synth.road_offset" => s.road_offset = parse(key, v)?,
            "synth.building_size" => s.building_size = pair(key, v)?,
            "synth.building_height" => s.building_height = pair(key, v)?,
            "synth.vegetation_size" => s.vegetation_size = pair(key, v)?,
            "synth.vegetation_height" => s.vegetation_height = pair(key, v)?,
            "synth.object_distance" => s.object_distance = pair(key, v)?,
            "synth.camera_clearance" => s.camera_clearance = parse(key, v)?,
            "synth.asymmetric" => s.asymmetric = boolean(key, v)?,
            "synth.asymmetry_margin" => s.asymmetry_margin = parse(key, v)?,
            "synth.noise_amp" => s.noise_amp = parse(key, v)?,
            "synth.label_noise" => s.label_noise = parse(key, v)?,
            "synth.random_orientation" => s.random_orientation = boolean(key, v)?,
            "data.seed" => self.data_seed = parse(key, v)?,
            "data.scenes" => self.scenes = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.grid" => t.sparse_grid = pair(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.bn_decay" => t.bn_decay = parse(key, v)?,
            "train.eval_every" => t.eval_every = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "finetune.steps" => self.finetune_steps = parse(key, v)?,
            "finetune.images" => self.finetune_images = parse(key, v)?,
            "geocal.grid" => self.geocal_grid = parse(key, v)?,
            "geocal.step" => self.geocal_step = parse(key, v)?,
            "render.scale" => self.render.scale = parse(key, v)?,
            "render.palette" => self.render.palette = palette(key, v)?,
            "render.frustums" => self.render.frustums = boolean(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn set_assignment(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{kv}'")))?;
        self.set(k.trim(), v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_assignment(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        RunConfig::from_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every key with its resolved value, one `key=value` per line, in a
    /// fixed order. Feeding this back through [`RunConfig::from_text`]
    /// reproduces the configuration.
    pub fn echo(&self) -> String {
        let (m, s, t) = (&self.model, &self.synth, &self.train);
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k}={v}");
        };
        kv("model.h_a", m.h_a.to_string());
        kv("model.w_a", m.w_a.to_string());
        kv("model.h_g", m.h_g.to_string());
        kv("model.w_g", m.w_g.to_string());
        kv("model.image_size", m.backbone.input_size.to_string());
        kv("model.classes", m.classes.to_string());
        kv("model.d_s", m.d_s.to_string());
        kv("model.backbone", join(&m.backbone.stage_channels));
        kv("model.taps", join(&m.backbone.taps));
        kv("model.head", join(&m.head_widths));
        kv("model.s_channels", join(&m.s_channels));
        kv("model.f_widths", join(&m.f_widths));
        kv(
            "model.transform",
            match m.transform {
                TransformKind::Adaptive => "adaptive",
                TransformKind::Naive => "naive",
            }
            .into(),
        );
        kv("model.seed", self.model_seed.to_string());
        kv("synth.north_col", s.north_col.to_string());
        kv("synth.camera_height", format!("{:?}", s.camera_height));
        kv("synth.elev_min", format!("{:?}", s.elev_min));
        kv("synth.elev_max", format!("{:?}", s.elev_max));
        kv("synth.view_radius", format!("{:?}", s.view_radius));
        kv("synth.roads", format!("{},{}", s.roads.0, s.roads.1));
        kv("synth.buildings", format!("{},{}", s.buildings.0, s.buildings.1));
        kv("synth.vegetation", format!("{},{}", s.vegetation.0, s.vegetation.1));
        kv("synth.road_width", format!("{:?},{:?}", s.road_width.0, s.road_width.1));
        kv("synth.road_offset", format!("{:?}", s.road_offset));
        kv("synth.building_size", format!("{:?},{:?}", s.building_size.0, s.building_size.1));
        kv("synth.building_height", format!("{:?},{:?}", s.building_height.0, s.building_height.1));
        kv("synth.vegetation_size", format!("{:?},{:?}", s.vegetation_size.0, s.vegetation_size.1));
        kv("synth.vegetation_height", format!("{:?},{:?}", s.vegetation_height.0, s.vegetation_height.1));
        kv("synth.object_distance", format!("{:?},{:?}", s.object_distance.0, s.object_distance.1));
        kv("synth.camera_clearance", format!("{:?}", s.camera_clearance));
        kv("synth.asymmetric", s.asymmetric.to_string());
        kv("synth.asymmetry_margin", s.asymmetry_margin.to_string());
        kv("synth.noise_amp", format!("{:?}", s.noise_amp));
        kv("synth.label_noise", format!("{:?}", s.label_noise));
        kv("synth.random_orientation", s.random_orientation.to_string());
        kv("data.seed", self.data_seed.to_string());
        kv("data.scenes", self.scenes.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", format!("{:?}", t.lr));
        kv("train.grid", format!("{},{}", t.sparse_grid.0, t.sparse_grid.1));
        kv("train.seed", t.seed.to_string());
        kv("train.bn_decay", format!("{:?}", t.bn_decay));
        kv("train.eval_every", t.eval_every.to_string());
        kv("train.clip_norm", format!("{:?}", t.clip_norm));
        kv("finetune.steps", self.finetune_steps.to_string());
        kv("finetune.images", self.finetune_images.to_string());
        kv("geocal.grid", self.geocal_grid.to_string());
        kv("geocal.step", self.geocal_step.to_string());
        kv("render.scale", self.render.scale.to_string());
        kv(
            "render.palette",
            self.render.palette.iter().map(|c| join(c)).collect::<Vec<_>>().join(";"),
        );
        kv("render.frustums", self.render.frustums.to_string());
        kv("threads", self.threads.to_string());
        o
    }

    /// Checks every section; called once after all overrides.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.train.validate(self.model.h_g, self.model.w_g)?;
        self.render.validate(self.model.classes)?;
        if self.model.classes != crossview_core::synth::CLASSES {
            return Err(Error::Config(format!(
                "the synthetic world has {} classes, model.classes is {}",
                crossview_core::synth::CLASSES,
                self.model.classes
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be ≥ 1".into()));
        }
        if self.geocal_grid == 0 || self.geocal_step < 0 {
            return Err(Error::Config("geocal.grid ≥ 1 and geocal.step ≥ 0 required".into()));
        }
        Ok(())
    }

    /// The model-only part of the configuration, as stored in checkpoints.
    pub fn model_echo(&self) -> String {
        self.echo().lines().filter(|l| l.starts_with("model.")).fold(String::new(), |mut s, l| {
            s += l;
            s.push('\n');
            s
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("train.lr", "0.0025").unwrap();
        c.set("synth.roads", "2, 3").unwrap();
        c.set("render.palette", "1,2,3;4,5,6;7,8,9;10,11,12").unwrap();
        c.set("model.transform", "naive").unwrap();
        let back = RunConfig::from_text(&c.echo()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.echo(), c.echo());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_text("train.learning_rate = 1").is_err());
        assert!(RunConfig::from_text("train.lr = fast").is_err());
        assert!(RunConfig::from_text("train.grid = 4").is_err());
        assert!(RunConfig::from_text("just words").is_err());
        let e = RunConfig::from_text("# ok\n\ntrain.epochs = 2\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("line 4"), "{e}");
    }

    #[test]
    fn shared_dimensions_follow_the_model() {
        let c = RunConfig::from_text("model.w_g = 8\nmodel.image_size = 32").unwrap();
        assert_eq!((c.model.w_g, c.synth.w_g), (8, 8));
        assert_eq!((c.model.backbone.input_size, c.synth.image_size), (32, 32));
    }

    #[test]
    fn comments_and_later_assignments_win() {
        let c = RunConfig::from_text("train.epochs = 3 # three\ntrain.epochs = 4").unwrap();
        assert_eq!(c.train.epochs, 4);
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let mut c = RunConfig::default();
        c.set("model.classes", "3").unwrap();
        assert!(c.validate().is_err());
    }
}
