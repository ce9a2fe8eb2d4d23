//! On-disk scene datasets: `train/` and `test/` WAV pairs with sidecars plus
//! a manifest listing every file and seed.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mutud::config::RunConfig;
use mutud::models::PreparedScene;
use mutud::signal::wav::{load_scene, save_scene};
use mutud::training::{generate, prepare_all, test_specs, train_specs, SceneSpec};

use crate::exit::{Classify, Failure, Kind};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub stem: String,
    pub seed: u64,
    pub snr_db: f64,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Hash of the `[scene]` section the scenes were generated from.
    pub scene_hash: String,
    pub duration_s: f64,
    pub k_factor: usize,
    pub d_v: usize,
    pub train: Vec<Entry>,
    pub test: Vec<Entry>,
}

pub fn scene_hash(cfg: &RunConfig) -> String {
    let bytes = serde_json::to_vec(&cfg.scene).expect("scene section serializes");
    hex::encode(Sha256::digest(bytes))
}

fn write_split(cfg: &RunConfig, dir: &Path, split: &str, specs: &[SceneSpec]) -> Result<Vec<Entry>, Failure> {
    let sub = dir.join(split);
    fs::create_dir_all(&sub).data()?;
    specs
        .iter()
        .map(|spec| {
            let scene = generate(cfg, *spec).data()?;
            let stem = format!("s{:07}", spec.seed);
            let paths = save_scene(&sub, &stem, &scene).data()?;
            let files = [paths.clean, paths.noisy, paths.sidecar]
                .iter()
                .map(|p| format!("{split}/{}", p.file_name().expect("file").to_string_lossy()))
                .collect();
            Ok(Entry { stem, seed: spec.seed, snr_db: spec.snr_db, files })
        })
        .collect()
}

/// Generate every scene of `cfg` under `dir` and write the manifest.
pub fn generate_dataset(cfg: &RunConfig, dir: &Path) -> Result<Manifest, Failure> {
    cfg.validate()?;
    let (train, test) = (train_specs(cfg), test_specs(cfg));
    let train_seeds: HashSet<u64> = train.iter().map(|s| s.seed).collect();
    if test.iter().any(|s| train_seeds.contains(&s.seed)) {
        return Err(Failure::new(Kind::Config, anyhow::anyhow!("train and test seed ranges overlap")));
    }
    let manifest = Manifest {
        scene_hash: scene_hash(cfg),
        duration_s: cfg.scene.duration_s,
        k_factor: cfg.scene.k_factor,
        d_v: cfg.scene.d_v,
        train: write_split(cfg, dir, "train", &train)?,
        test: write_split(cfg, dir, "test", &test)?,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest).expect("manifest serializes")).data()?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, Failure> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Failure::new(Kind::Data, anyhow::anyhow!("{}: {e} (run `mutud generate` first)", path.display())))?;
    serde_json::from_str(&text).data()
}

/// Check the manifest was generated with the scene settings of `cfg`.
pub fn check_compatible(manifest: &Manifest, cfg: &RunConfig) -> Result<(), Failure> {
    if manifest.k_factor != cfg.scene.k_factor || manifest.d_v != cfg.scene.d_v || manifest.duration_s != cfg.scene.duration_s {
        return Err(Failure::new(
            Kind::Config,
            anyhow::anyhow!(
                "dataset has K={} D_v={} duration {} s; config asks for K={} D_v={} duration {} s",
                manifest.k_factor,
                manifest.d_v,
                manifest.duration_s,
                cfg.scene.k_factor,
                cfg.scene.d_v,
                cfg.scene.duration_s
            ),
        ));
    }
    Ok(())
}

pub fn load_entries(dir: &Path, split: &str, entries: &[Entry]) -> Result<Vec<PreparedScene>, Failure> {
    let sub: PathBuf = dir.join(split);
    let scenes = entries.iter().map(|e| load_scene(&sub, &e.stem)).collect::<Result<Vec<_>, _>>().data()?;
    Ok(prepare_all(&scenes)?)
}
