//! Loading a dataset from its manifest and assigning training roles.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use admt_core::data::{split_train, DatasetManifest, Role, SegSample};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Samples in manifest order with the roles the manifest assigns.
    pub samples: Vec<(SegSample, Role)>,
}

/// Role assignment for one run, serialized as `{"labeled": [...], ...}`.
pub type Roles = BTreeMap<Role, Vec<String>>;

impl Dataset {
    /// Reads the manifest and every image it lists; paths resolve against
    /// the manifest's directory.
    pub fn load(manifest_path: &Path) -> CliResult<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let samples = manifest.load_samples(root)?;
        Ok(Self { manifest, samples })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    /// Keeps the manifest's test set and re-draws labeled versus unlabeled
    /// among the remaining samples from `(labeled_fraction, seed)`.
    pub fn training_roles(&self, labeled_fraction: f64, seed: u64) -> CliResult<Roles> {
        let train_ids: Vec<String> = self
            .samples
            .iter()
            .filter(|(_, r)| *r != Role::Test)
            .map(|(s, _)| s.id.clone())
            .collect();
        let mut roles = Roles::new();
        for (id, role) in split_train(&train_ids, labeled_fraction, seed).map_err(|e| CliError::Usage(e.to_string()))? {
            roles.entry(role).or_default().push(id);
        }
        roles.insert(Role::Test, self.ids_with_role(Role::Test));
        for ids in roles.values_mut() {
            ids.sort();
        }
        Ok(roles)
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<String> {
        self.samples.iter().filter(|(_, r)| *r == role).map(|(s, _)| s.id.clone()).collect()
    }

    /// Samples whose id is listed under `role`, in manifest order.
    pub fn select(&self, roles: &Roles, role: Role) -> Vec<SegSample> {
        let ids = roles.get(&role).map(Vec::as_slice).unwrap_or_default();
        self.samples
            .iter()
            .filter(|(s, _)| ids.binary_search(&s.id).is_ok())
            .map(|(s, _)| s.clone())
            .collect()
    }

    /// The manifest's own roles.
    pub fn manifest_roles(&self) -> Roles {
        let mut roles = Roles::new();
        for (s, r) in &self.samples {
            roles.entry(*r).or_default().push(s.id.clone());
        }
        for ids in roles.values_mut() {
            ids.sort();
        }
        roles
    }
}

pub fn write_roles(path: &Path, roles: &Roles) -> CliResult<()> {
    let text = serde_json::to_string_pretty(roles).expect("roles serialize") + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_roles(path: &Path) -> CliResult<Roles> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut roles: Roles =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    for ids in roles.values_mut() {
        ids.sort();
    }
    Ok(roles)
}
