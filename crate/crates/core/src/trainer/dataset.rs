//! On-disk datasets: one PPM per scene and condition, plus a JSON-lines manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scene::{gen_scene, render_condition, scene_seed, ConditionKind, Scene, SceneSpec};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub class_id: usize,
    pub spec: SceneSpec,
    /// Condition kind name to file path relative to the manifest.
    pub files: BTreeMap<String, String>,
}

impl ManifestEntry {
    /// Regenerates the scene and checks it against the recorded spec.
    pub fn scene(&self) -> Result<Scene> {
        let scene = gen_scene(self.seed);
        if scene.spec != self.spec {
            return Err(Error::contract(format!(
                "scene {} (seed {}) does not regenerate to its recorded spec",
                self.index, self.seed
            )));
        }
        Ok(scene)
    }

    pub fn path(&self, root: &Path, kind: ConditionKind) -> Result<PathBuf> {
        self.files
            .get(kind.name())
            .map(|f| root.join(f))
            .ok_or_else(|| Error::contract(format!("scene {} has no {} image", self.index, kind.name())))
    }
}

/// The scenes of dataset `base_seed`, in index order.
pub fn generate_scenes(base_seed: u64, count: usize) -> Vec<Scene> {
    (0..count).map(|i| gen_scene(scene_seed(base_seed, i))).collect()
}

/// Writes `count` scenes with every condition rendering and the manifest.
pub fn write_dataset(dir: &Path, base_seed: u64, count: usize) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for (index, scene) in generate_scenes(base_seed, count).into_iter().enumerate() {
        let mut files = BTreeMap::new();
        for kind in ConditionKind::ALL {
            let name = format!("scene_{index:05}_{}.ppm", kind.name());
            render_condition(&scene.spec, kind).write(&dir.join(&name))?;
            files.insert(kind.name().to_owned(), name);
        }
        entries.push(ManifestEntry {
            index,
            seed: scene.seed,
            class_id: scene.spec.class_id,
            spec: scene.spec,
            files,
        });
    }
    write_manifest(&dir.join(MANIFEST), &entries)?;
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entry serialises");
        writeln!(f, "{line}").map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            let entry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                offset: offset + e.column().saturating_sub(1),
                reason: format!("{}: {e}", path.display()),
            })?;
            out.push(entry);
        }
        offset += line.len() + 1;
    }
    Ok(out)
}
