//! Content-addressed image storage for one run.
//!
//! Files are named `<sha256>.<ext>` and written through a temporary file plus
//! rename. Completed generation requests are logged to `requests.jsonl` so a
//! resumed run answers them from disk instead of calling the generator again.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::BackendError;

pub const SIM_MEDIA_TYPE: &str = "application/x-faircot-sim+json";
const REQUEST_LOG: &str = "requests.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    /// Hex SHA-256 of the image bytes.
    pub id: String,
    pub media_type: String,
}

impl ImageRef {
    pub fn file_name(&self) -> String {
        format!("{}.{}", self.id, extension_for(&self.media_type))
    }
}

pub fn extension_for(media_type: &str) -> &'static str {
    match media_type {
        "image/png" => "png",
        "image/jpeg" => "jpg",
        "image/webp" => "webp",
        SIM_MEDIA_TYPE => "sim.json",
        _ => "bin",
    }
}

pub fn media_type_for(file_name: &str) -> Option<&'static str> {
    let lower = file_name.to_ascii_lowercase();
    if lower.ends_with(".sim.json") {
        Some(SIM_MEDIA_TYPE)
    } else if lower.ends_with(".png") {
        Some("image/png")
    } else if lower.ends_with(".jpg") || lower.ends_with(".jpeg") {
        Some("image/jpeg")
    } else if lower.ends_with(".webp") {
        Some("image/webp")
    } else {
        None
    }
}

pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize, Deserialize)]
struct RequestEntry {
    key: String,
    images: Vec<ImageRef>,
}

#[derive(Debug, Default)]
pub struct ImageStore {
    root: Option<PathBuf>,
    mem: RwLock<HashMap<String, Arc<Vec<u8>>>>,
    requests: Mutex<IndexMap<String, Vec<ImageRef>>>,
}

impl ImageStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a directory-backed store and reloads its
    /// request log.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| store_err(&root, e))?;
        let mut requests = IndexMap::new();
        let log = root.join(REQUEST_LOG);
        if log.exists() {
            let text = fs::read_to_string(&log).map_err(|e| store_err(&log, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                // a torn final line from an interrupted run is ignored
                if let Ok(entry) = serde_json::from_str::<RequestEntry>(line) {
                    requests.insert(entry.key, entry.images);
                }
            }
        }
        Ok(Self {
            root: Some(root),
            mem: RwLock::default(),
            requests: Mutex::new(requests),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn put(&self, bytes: &[u8], media_type: &str) -> Result<ImageRef, BackendError> {
        let image = ImageRef {
            id: content_id(bytes),
            media_type: media_type.to_string(),
        };
        if let Some(root) = &self.root {
            let path = root.join(image.file_name());
            if !path.exists() {
                let tmp = root.join(format!(".{}.tmp", image.file_name()));
                fs::write(&tmp, bytes).map_err(|e| store_err(&tmp, e))?;
                fs::rename(&tmp, &path).map_err(|e| store_err(&path, e))?;
            }
        }
        self.mem
            .write()
            .expect("store poisoned")
            .insert(image.id.clone(), Arc::new(bytes.to_vec()));
        Ok(image)
    }

    pub fn get(&self, image: &ImageRef) -> Result<Arc<Vec<u8>>, BackendError> {
        if let Some(bytes) = self.mem.read().expect("store poisoned").get(&image.id) {
            return Ok(bytes.clone());
        }
        let root = self
            .root
            .as_ref()
            .ok_or_else(|| BackendError::Store(format!("unknown image {}", image.id)))?;
        let path = root.join(image.file_name());
        let bytes = Arc::new(fs::read(&path).map_err(|e| store_err(&path, e))?);
        self.mem
            .write()
            .expect("store poisoned")
            .insert(image.id.clone(), bytes.clone());
        Ok(bytes)
    }

    pub fn cached(&self, key: &str) -> Option<Vec<ImageRef>> {
        self.requests
            .lock()
            .expect("store poisoned")
            .get(key)
            .cloned()
    }

    pub fn remember(&self, key: &str, images: &[ImageRef]) -> Result<(), BackendError> {
        let mut requests = self.requests.lock().expect("store poisoned");
        if let Some(root) = &self.root {
            let entry = RequestEntry {
                key: key.to_string(),
                images: images.to_vec(),
            };
            let mut line = serde_json::to_string(&entry).expect("entry serializes");
            line.push('\n');
            let log = root.join(REQUEST_LOG);
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log)
                .map_err(|e| store_err(&log, e))?;
            file.write_all(line.as_bytes())
                .map_err(|e| store_err(&log, e))?;
        }
        requests.insert(key.to_string(), images.to_vec());
        Ok(())
    }

    /// Image files directly inside `dir`, sorted by file name. The id is the
    /// file stem, so stores written by this type keep their content hashes.
    pub fn scan_dir(dir: &Path) -> Result<Vec<(ImageRef, PathBuf)>, BackendError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| store_err(dir, e))? {
            let entry = entry.map_err(|e| store_err(dir, e))?;
            let path = entry.path();
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') || !path.is_file() {
                continue;
            }
            if let Some(media_type) = media_type_for(&name) {
                let ext = extension_for(media_type);
                let stem = name
                    .strip_suffix(&format!(".{ext}"))
                    .or_else(|| name.rsplit_once('.').map(|(s, _)| s))
                    .unwrap_or(&name)
                    .to_string();
                out.push((
                    ImageRef {
                        id: stem,
                        media_type: media_type.to_string(),
                    },
                    path,
                ));
            }
        }
        out.sort_by(|a, b| a.1.cmp(&b.1));
        Ok(out)
    }
}

fn store_err(path: &Path, e: std::io::Error) -> BackendError {
    BackendError::Store(format!("{}: {e}", path.display()))
}
