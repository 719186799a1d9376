//! On-disk datasets: a `manifest` text file plus four CVTN blobs per pair,
//! `pair_%06d.{aerial,alabels,glabels,meta}`.
//!
//! The manifest starts with `crossview-dataset 1`, then `split=`, `count=`
//! and the resolved run configuration. `meta` is an f64 vector
//! `[seed_hi, seed_lo, offset_x, offset_y, shift, orientation]` (the scene
//! seed split into two exactly representable 32-bit halves).

use std::fs;
use std::path::{Path, PathBuf};

use crossview_core::synth::{make_pair, pair_seed, AlignedPair, PairMeta, Split, CLASSES};
use crossview_core::{LabelMap, Tensor};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tnsr;

pub const HEADER: &str = "crossview-dataset 1";
pub const EXTENSIONS: [&str; 4] = ["aerial", "alabels", "glabels", "meta"];

pub fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("unknown split '{s}' (expected train or test)"))),
    }
}

fn pair_path(dir: &Path, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("pair_{i:06}.{ext}"))
}

/// Generates `n` pairs of `split`; each pair depends only on its own seed,
/// so the result does not depend on the thread count.
pub fn generate(config: &RunConfig, split: Split, n: usize) -> Result<Vec<AlignedPair>> {
    (0..n)
        .into_par_iter()
        .map(|i| make_pair(pair_seed(config.data_seed, split, i), &config.synth).map_err(Error::from))
        .collect()
}

fn labels_tensor(l: &LabelMap) -> Tensor<f32> {
    Tensor::new(vec![l.height(), l.width(), l.classes()], l.probs().to_vec()).unwrap()
}

fn labels_from(t: Tensor<f32>, what: &str) -> Result<LabelMap> {
    match *t.shape() {
        [h, w, k] => Ok(LabelMap::new(h, w, k, t.into_data())?),
        _ => Err(Error::Format(format!("{what}: expected a [h, w, K] label tensor, got {:?}", t.shape()))),
    }
}

fn meta_tensor(p: &AlignedPair) -> Tensor<f64> {
    let s = p.meta.scene_seed;
    Tensor::new(
        vec![6],
        vec![
            (s >> 32) as f64,
            (s & 0xFFFF_FFFF) as f64,
            p.meta.offset.0,
            p.meta.offset.1,
            p.meta.shift as f64,
            p.true_orientation,
        ],
    )
    .unwrap()
}

fn is_dataset_file(name: &str) -> bool {
    name == "manifest" || (name.starts_with("pair_") && EXTENSIONS.iter().any(|e| name.ends_with(&format!(".{e}"))))
}

/// Writes `pairs` to `dir`. A non-empty `dir` is refused unless `force`, in
/// which case only files belonging to a previous dataset are removed first.
pub fn write(dir: &Path, pairs: &[AlignedPair], split: Split, config: &RunConfig, force: bool) -> Result<()> {
    if dir.exists() {
        let entries: Vec<_> = fs::read_dir(dir)
            .map_err(Error::io(dir))?
            .collect::<std::io::Result<_>>()
            .map_err(Error::io(dir))?;
        if !entries.is_empty() && !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        for e in entries {
            if e.file_name().to_str().is_some_and(is_dataset_file) {
                fs::remove_file(e.path()).map_err(Error::io(&e.path()))?;
            }
        }
    }
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for (i, p) in pairs.iter().enumerate() {
        let blobs = [
            tnsr::encode(&p.aerial_image),
            tnsr::encode(&labels_tensor(&p.aerial_labels)),
            tnsr::encode(&labels_tensor(&p.ground_labels)),
            tnsr::encode(&meta_tensor(p)),
        ];
        for (ext, blob) in EXTENSIONS.iter().zip(blobs) {
            let path = pair_path(dir, i, ext);
            fs::write(&path, blob).map_err(Error::io(&path))?;
        }
    }
    let manifest = format!(
        "{HEADER}\nsplit={}\ncount={}\n{}",
        split.name(),
        pairs.len(),
        config.echo()
    );
    let path = dir.join("manifest");
    fs::write(&path, manifest).map_err(Error::io(&path))
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub split: Split,
    pub count: usize,
    pub config: RunConfig,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest");
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(bad("missing dataset header"));
    }
    let mut field = |k: &str| {
        lines
            .next()
            .and_then(|l| l.strip_prefix(k))
            .map(str::to_string)
            .ok_or_else(|| bad(&format!("missing {k}")))
    };
    let split = parse_split(&field("split=")?)?;
    let count = field("count=")?.parse().map_err(|_| bad("bad count"))?;
    let rest: Vec<&str> = lines.collect();
    let config = RunConfig::from_text(&rest.join("\n")).map_err(|e| bad(&e.to_string()))?;
    Ok(Manifest { split, count, config })
}

fn read_blob(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::io(path))
}

pub fn read_pair(dir: &Path, i: usize) -> Result<AlignedPair> {
    let ctx = |ext: &str, e: Error| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", pair_path(dir, i, ext).display())),
        e => e,
    };
    let aerial_image = tnsr::decode::<f32>(&read_blob(&pair_path(dir, i, "aerial"))?).map_err(|e| ctx("aerial", e))?;
    let aerial_labels = labels_from(
        tnsr::decode(&read_blob(&pair_path(dir, i, "alabels"))?).map_err(|e| ctx("alabels", e))?,
        "alabels",
    )?;
    let ground_labels = labels_from(
        tnsr::decode(&read_blob(&pair_path(dir, i, "glabels"))?).map_err(|e| ctx("glabels", e))?,
        "glabels",
    )?;
    let meta = tnsr::decode::<f64>(&read_blob(&pair_path(dir, i, "meta"))?).map_err(|e| ctx("meta", e))?;
    let m = meta.data();
    if m.len() != 6 {
        return Err(ctx("meta", Error::Format(format!("expected 6 values, got {}", m.len()))));
    }
    Ok(AlignedPair {
        aerial_image,
        aerial_labels,
        ground_labels,
        true_orientation: m[5],
        meta: PairMeta {
            scene_seed: ((m[0] as u64) << 32) | m[1] as u64,
            offset: (m[2], m[3]),
            shift: m[4] as usize,
        },
    })
}

/// Reads a dataset and checks its pairs against `expect`'s dimensions.
pub fn read(dir: &Path, expect: &RunConfig) -> Result<(Manifest, Vec<AlignedPair>)> {
    let manifest = read_manifest(dir)?;
    let pairs = (0..manifest.count).map(|i| read_pair(dir, i)).collect::<Result<Vec<_>>>()?;
    let m = &expect.model;
    let s = m.backbone.input_size;
    for (i, p) in pairs.iter().enumerate() {
        let ok = p.aerial_image.shape() == [3, s, s]
            && (p.aerial_labels.height(), p.aerial_labels.width()) == (m.h_a, m.w_a)
            && (p.ground_labels.height(), p.ground_labels.width()) == (m.h_g, m.w_g)
            && p.ground_labels.classes() == CLASSES;
        if !ok {
            return Err(Error::Config(format!(
                "pair {i} of {} does not match the configured model (image {s}, aerial {}×{}, ground {}×{})",
                dir.display(),
                m.h_a,
                m.w_a,
                m.h_g,
                m.w_g
            )));
        }
    }
    Ok((manifest, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.set("synth.random_orientation", "true").unwrap();
        let pairs = generate(&cfg, Split::Test, 3).unwrap();
        write(dir.path(), &pairs, Split::Test, &cfg, false).unwrap();
        let (m, back) = read(dir.path(), &cfg).unwrap();
        assert_eq!(m.count, 3);
        assert_eq!(m.split, Split::Test);
        assert_eq!(m.config, cfg);
        assert_eq!(back, pairs);
    }

    #[test]
    fn non_empty_directory_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let pairs = generate(&cfg, Split::Train, 2).unwrap();
        write(dir.path(), &pairs, Split::Train, &cfg, false).unwrap();
        assert!(write(dir.path(), &pairs[..1], Split::Train, &cfg, false).is_err());
        write(dir.path(), &pairs[..1], Split::Train, &cfg, true).unwrap();
        assert!(!pair_path(dir.path(), 1, "aerial").exists());
        assert_eq!(read(dir.path(), &cfg).unwrap().1.len(), 1);
    }

    #[test]
    fn seeds_survive_the_f64_meta() {
        let p = AlignedPair {
            meta: PairMeta {
                scene_seed: u64::MAX - 12345,
                offset: (0.0, 0.0),
                shift: 3,
            },
            ..generate(&RunConfig::default(), Split::Train, 1).unwrap().remove(0)
        };
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), std::slice::from_ref(&p), Split::Train, &RunConfig::default(), false).unwrap();
        assert_eq!(read_pair(dir.path(), 0).unwrap().meta, p.meta);
    }
}
