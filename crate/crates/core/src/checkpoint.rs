//! Checkpoints: one HTSR file per named tensor plus `config.toml`.

use std::fs;
use std::path::Path;

use hiper_tensor::io as tio;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::HiPerformer;
use crate::nn::{InitRng, ParamBuilder, ParamStore};

pub const CONFIG_FILE: &str = "config.toml";

pub fn save(dir: impl AsRef<Path>, cfg: &ModelConfig, store: &ParamStore<f32>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    for e in store.entries() {
        tio::save(dir.join(format!("{}.htsr", e.name)), &e.value)?;
    }
    Ok(())
}

pub fn load(dir: impl AsRef<Path>) -> Result<(HiPerformer, ParamStore<f32>)> {
    let dir = dir.as_ref();
    let cfg = ModelConfig::from_toml(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let mut store = ParamStore::new();
    let mut rng = InitRng::new(0);
    let model = HiPerformer::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        let path = dir.join(format!("{name}.htsr"));
        let t = tio::load::<f32>(&path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if t.shape() != store.entry(id).shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {:?}, model expects {:?}",
                t.shape(),
                store.entry(id).shape
            )));
        }
        *store.value_mut(id) = t;
    }
    Ok((model, store))
}
