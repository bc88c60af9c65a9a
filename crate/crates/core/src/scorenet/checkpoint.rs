use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetConfig, ScoreNet};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "scorenet-v1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: String,
    config: NetConfig,
    seed: u64,
    fourier: Vec<f64>,
    params: Vec<f64>,
}

impl ScoreNet {
    /// JSON checkpoint, written to a sibling temp file and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION.to_string(),
            config: self.config.clone(),
            seed: self.seed,
            fourier: self.fourier.clone(),
            params: self.params.clone(),
        };
        let text = serde_json::to_string(&ck).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = Path::new(&tmp);
        {
            let mut f = fs::File::create(tmp)?;
            f.write_all(text.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let text = fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {:?}", ck.version)));
        }
        ScoreNet::from_parts(ck.config, ck.seed, ck.fourier, ck.params)
            .map_err(|e| bad(e.to_string()))
    }
}
