//! Download cache for the IDX archives, verified against pinned MD5 sums.
//!
//! Layout: `<cache_dir>/<dataset>/<file>.gz`. Archives are stored as
//! downloaded and decompressed when loaded.

use std::fs;
use std::io::{Read as _, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use md5::{Digest, Md5};

use super::{Dataset, DatasetName, Provenance, Split};
use crate::error::{Error, Result};

/// Environment variable naming the data cache directory.
pub const CACHE_DIR_ENV: &str = "REPGAN_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RemoteFile {
    pub name: &'static str,
    pub md5: &'static str,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub dataset: DatasetName,
    pub base_url: &'static str,
    pub train_images: RemoteFile,
    pub train_labels: RemoteFile,
    pub test_images: RemoteFile,
    pub test_labels: RemoteFile,
}

impl Manifest {
    pub fn files(&self) -> [RemoteFile; 4] {
        [self.train_images, self.train_labels, self.test_images, self.test_labels]
    }

    pub fn split_files(&self, split: Split) -> (RemoteFile, RemoteFile) {
        match split {
            Split::Train => (self.train_images, self.train_labels),
            Split::Test => (self.test_images, self.test_labels),
        }
    }
}

const MNIST: Manifest = Manifest {
    dataset: DatasetName::Mnist,
    base_url: "https://ossci-datasets.s3.amazonaws.com/mnist/",
    train_images: RemoteFile {
        name: "train-images-idx3-ubyte.gz",
        md5: "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    },
    train_labels: RemoteFile {
        name: "train-labels-idx1-ubyte.gz",
        md5: "d53e105ee54ea40749a09fcbcd1e9432",
    },
    test_images: RemoteFile {
        name: "t10k-images-idx3-ubyte.gz",
        md5: "9fb629c4189551a2d022fa330f9573f3",
    },
    test_labels: RemoteFile {
        name: "t10k-labels-idx1-ubyte.gz",
        md5: "ec29112dd5afa0611ce80d1b7f02629c",
    },
};

const FASHION_MNIST: Manifest = Manifest {
    dataset: DatasetName::FashionMnist,
    base_url: "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
    train_images: RemoteFile {
        name: "train-images-idx3-ubyte.gz",
        md5: "8d4fb7e6c68d591d4c3dfef9ec88bf0d",
    },
    train_labels: RemoteFile {
        name: "train-labels-idx1-ubyte.gz",
        md5: "25c81989df183df01b3e8a0aad5dffbe",
    },
    test_images: RemoteFile {
        name: "t10k-images-idx3-ubyte.gz",
        md5: "bef4ecab320f06d8554ea6380940ec79",
    },
    test_labels: RemoteFile {
        name: "t10k-labels-idx1-ubyte.gz",
        md5: "bb300cfdad3c16e7a12a480ee83cd310",
    },
};

pub fn manifest(name: DatasetName) -> &'static Manifest {
    match name {
        DatasetName::Mnist => &MNIST,
        DatasetName::FashionMnist => &FASHION_MNIST,
    }
}

pub fn md5_hex(bytes: &[u8]) -> String {
    Md5::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Fetches the body at a URL.
pub trait Transport {
    fn get(&self, url: &str) -> Result<Vec<u8>>;
}

/// HTTP(S) with exponential backoff between attempts.
#[derive(Clone, Debug)]
pub struct HttpTransport {
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl Default for HttpTransport {
    fn default() -> Self {
        HttpTransport {
            attempts: 4,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }
}

impl Transport for HttpTransport {
    fn get(&self, url: &str) -> Result<Vec<u8>> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let mut backoff = self.initial_backoff;
        let mut last = String::new();
        for attempt in 0..self.attempts.max(1) {
            if attempt > 0 {
                thread::sleep(backoff);
                backoff *= 2;
            }
            match agent.get(url).call() {
                Ok(resp) => {
                    let mut body = Vec::new();
                    match resp.into_reader().read_to_end(&mut body) {
                        Ok(_) => return Ok(body),
                        Err(e) => last = e.to_string(),
                    }
                }
                // Client errors will not improve on retry.
                Err(ureq::Error::Status(code, _)) if (400..500).contains(&code) => {
                    return Err(Error::Network {
                        url: url.into(),
                        reason: format!("HTTP {code}"),
                    });
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::Network {
            url: url.into(),
            reason: last,
        })
    }
}

pub fn dataset_dir(cache_dir: &Path, name: DatasetName) -> PathBuf {
    cache_dir.join(name.tag())
}

/// Renames a corrupted file out of the way and returns its new path.
fn quarantine(path: &Path) -> Result<PathBuf> {
    let mut n = 0;
    loop {
        let suffix = if n == 0 { "corrupt".to_string() } else { format!("corrupt.{n}") };
        let target = path.with_extension(format!(
            "{}.{suffix}",
            path.extension().and_then(|e| e.to_str()).unwrap_or("")
        ));
        if !target.exists() {
            fs::rename(path, &target)?;
            return Ok(target);
        }
        n += 1;
    }
}

/// Checks a cached file against its pinned hash, quarantining it on mismatch.
fn verify_cached(path: &Path, file: &RemoteFile) -> Result<Provenance> {
    let bytes = fs::read(path)?;
    let actual = md5_hex(&bytes);
    if actual != file.md5 {
        let moved = quarantine(path)?;
        return Err(Error::HashMismatch {
            file: format!("{} (moved to {})", path.display(), moved.display()),
            expected: file.md5.into(),
            actual,
        });
    }
    Ok(Provenance {
        path: path.to_path_buf(),
        md5: actual,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).expect("cache file name");
    let tmp = path.with_file_name(format!(".{name}.partial"));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Ensures every file in `files` is present in `dir` with its pinned hash,
/// downloading missing ones from `base_url`. Present files are only hashed.
pub fn fetch_files(dir: &Path, base_url: &str, files: &[RemoteFile], transport: &dyn Transport) -> Result<Vec<Provenance>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for file in files {
        let path = dir.join(file.name);
        if path.exists() {
            out.push(verify_cached(&path, file)?);
            continue;
        }
        let url = format!("{}/{}", base_url.trim_end_matches('/'), file.name);
        let bytes = transport.get(&url)?;
        let actual = md5_hex(&bytes);
        if actual != file.md5 {
            return Err(Error::HashMismatch {
                file: url,
                expected: file.md5.into(),
                actual,
            });
        }
        write_atomic(&path, &bytes)?;
        out.push(Provenance { path, md5: actual });
    }
    Ok(out)
}

/// Ensures the four archives of `name` are cached under
/// `<cache_dir>/<dataset>/` and match the pinned manifest.
pub fn fetch_dataset(
    name: DatasetName,
    cache_dir: &Path,
    url_override: Option<&str>,
    transport: &dyn Transport,
) -> Result<Vec<Provenance>> {
    let m = manifest(name);
    fetch_files(
        &dataset_dir(cache_dir, name),
        url_override.unwrap_or(m.base_url),
        &m.files(),
        transport,
    )
}

/// Loads one split from the cache without touching the network.
pub fn load_split(name: DatasetName, split: Split, cache_dir: &Path) -> Result<Dataset> {
    let m = manifest(name);
    let dir = dataset_dir(cache_dir, name);
    let (img, lab) = m.split_files(split);
    let mut provenance = Vec::new();
    for f in [img, lab] {
        let path = dir.join(f.name);
        if !path.exists() {
            return Err(Error::Data(format!(
                "{} is not cached; run download-data or place the file there",
                path.display()
            )));
        }
        provenance.push(verify_cached(&path, &f)?);
    }
    let mut ds = Dataset::from_idx_files(name.tag(), split, &dir.join(img.name), &dir.join(lab.name))?;
    if ds.len() != split.expected_len() {
        return Err(Error::Data(format!(
            "{name} {} split has {} items, expected {}",
            split.tag(),
            ds.len(),
            split.expected_len()
        )));
    }
    ds.provenance = provenance;
    Ok(ds)
}
