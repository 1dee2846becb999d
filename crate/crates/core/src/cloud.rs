//! Monte Carlo point cloud over tail shapes.
//!
//! Each point draws a shape uniformly in `psi = asinh(xi)`, generates one
//! canonical GPD sample of size `n` plus one extra singleton from the same
//! tail, fits the shape of the sample, and records the triple
//!
//! ```text
//! (psi, psi_hat, w_next)      w_next = asinh(u_next)
//! ```
//!
//! where `u_next` is the singleton in the sample's normalized coordinates.
//! Location and scale cancel in those coordinates, so the canonical tail
//! `(mu, sigma) = (0, 1)` loses no generality.
//!
//! Generation is deterministic and order-independent: point `i` uses its
//! own counter-addressed RNG substream, so any worker count and any
//! interruption/resume schedule produces byte-identical artifacts.
//!
//! On disk a cloud is a directory holding a `manifest.txt` of `key=value`
//! lines plus fixed-size binary chunks `chunk_000000.bin`, each a row-major
//! sequence of little-endian `f64` triples.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimator::{fit_xi, OrderedSample, TailEstimate};
use crate::gpd::GpdParams;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.txt";
const PARTIAL_FILE: &str = "manifest.partial";

/// Cap on `|w_next|`; `asinh` of any finite `f64` stays below this, so the
/// cap only replaces infinities produced by overflowing normalized values.
pub const W_CAP: f64 = 710.0;

/// Attempts per point before a persistent degeneracy becomes an error.
const MAX_RETRIES: u32 = 100;

/// One stored cloud point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    /// True shape in search coordinates.
    pub psi: f64,
    /// Fitted shape in search coordinates.
    pub psi_hat: f64,
    /// `asinh` of the normalized singleton.
    pub w_next: f64,
}

/// Everything known about one generated point, including the pieces that
/// are not persisted (normalization geometry, retry bookkeeping).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenPoint {
    pub psi: f64,
    pub estimate: TailEstimate,
    /// Normalized singleton before the `asinh` transform.
    pub u_next: f64,
    pub w_next: f64,
    /// Anchor order statistic of the generating sample.
    pub x_mid: f64,
    /// Normalization span of the generating sample.
    pub x_span: f64,
    /// Redraws needed before a usable sample appeared.
    pub retries: u32,
}

impl GenPoint {
    pub fn point(&self) -> CloudPoint {
        CloudPoint {
            psi: self.psi,
            psi_hat: self.estimate.psi_hat,
            w_next: self.w_next,
        }
    }
}

/// Generation parameters of a cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudConfig {
    pub n_points: u64,
    pub psi_min: f64,
    pub psi_max: f64,
    /// Sample size behind each point.
    pub n: usize,
    pub seed: u64,
    pub chunk_size: u64,
}

impl CloudConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::InvalidInput("n_points must be at least 1".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::InvalidInput("chunk_size must be at least 1".into()));
        }
        if !(self.psi_min.is_finite() && self.psi_max.is_finite() && self.psi_min < self.psi_max) {
            return Err(Error::InvalidInput(format!(
                "psi range must be finite with psi_min < psi_max, got [{}, {}]",
                self.psi_min, self.psi_max
            )));
        }
        if self.n < 4 || self.n % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "sample size must be even and at least 4, got {}",
                self.n
            )));
        }
        Ok(())
    }

    pub fn chunk_count(&self) -> u64 {
        self.n_points.div_ceil(self.chunk_size)
    }

    fn chunk_len(&self, chunk: u64) -> u64 {
        let start = chunk * self.chunk_size;
        self.chunk_size.min(self.n_points - start)
    }
}

/// Counter-addressed RNG: one independent substream per point index under
/// a shared seed.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws a usable sample at the given shape and fits it, redrawing from the
/// same stream on degeneracy.
pub(crate) fn sample_and_fit<R: Rng + ?Sized>(
    params: &GpdParams,
    rng: &mut R,
    n: usize,
) -> Result<(OrderedSample, TailEstimate, u32)> {
    let mut retries = 0u32;
    loop {
        let attempt =
            OrderedSample::new(params.sample(rng, n)).and_then(|s| fit_xi(&s).map(|e| (s, e)));
        match attempt {
            Ok((sample, estimate)) => return Ok((sample, estimate, retries)),
            Err(_) if retries < MAX_RETRIES => retries += 1,
            Err(e) => return Err(e),
        }
    }
}

/// Generates one cloud point at a known shape, consuming draws from `rng`.
pub fn gen_point<R: Rng + ?Sized>(psi: f64, rng: &mut R, n: usize) -> Result<GenPoint> {
    gen_point_at(&GpdParams::standard(psi.sinh()), psi, rng, n)
}

/// As [`gen_point`] but at an explicit location and scale. The recorded
/// triple does not depend on them.
pub(crate) fn gen_point_at<R: Rng + ?Sized>(
    params: &GpdParams,
    psi: f64,
    rng: &mut R,
    n: usize,
) -> Result<GenPoint> {
    let (sample, estimate, retries) = sample_and_fit(params, rng, n)?;
    let x_next = params.sample(rng, 1)[0];
    let u_next = sample.normalize_value(x_next)?;
    let w_next = u_next.asinh().clamp(-W_CAP, W_CAP);
    Ok(GenPoint {
        psi,
        estimate,
        u_next,
        w_next,
        x_mid: sample.x_mid(),
        x_span: sample.span(),
        retries,
    })
}

/// Generates the point with the given global index, drawing its shape
/// uniformly in `psi` from the config range.
pub fn gen_indexed_point(config: &CloudConfig, index: u64) -> Result<GenPoint> {
    let mut rng = substream(config.seed, index);
    let span = config.psi_max - config.psi_min;
    let psi = config.psi_min + span * rng.random::<f64>();
    gen_point(psi, &mut rng, config.n)
}

/// Summary record persisted alongside the chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudManifest {
    pub format_version: u32,
    pub seed: u64,
    pub n_points: u64,
    pub psi_min: f64,
    pub psi_max: f64,
    pub n: usize,
    pub chunk_size: u64,
    pub chunk_count: u64,
    /// Total redraws across all points.
    pub retry_count: u64,
    /// Points whose fit clamped at the search-bracket edge.
    pub clamped_count: u64,
}

impl CloudManifest {
    pub fn config(&self) -> CloudConfig {
        CloudConfig {
            n_points: self.n_points,
            psi_min: self.psi_min,
            psi_max: self.psi_max,
            n: self.n,
            seed: self.seed,
            chunk_size: self.chunk_size,
        }
    }

    fn matches(&self, config: &CloudConfig) -> bool {
        self.config() == *config && self.chunk_count == config.chunk_count()
    }

    fn to_lines(&self) -> String {
        format!(
            "format_version={}\nseed={}\nn_points={}\npsi_min={}\npsi_max={}\nn={}\n\
             chunk_size={}\nchunk_count={}\nretry_count={}\nclamped_count={}\n",
            self.format_version,
            self.seed,
            self.n_points,
            self.psi_min,
            self.psi_max,
            self.n,
            self.chunk_size,
            self.chunk_count,
            self.retry_count,
            self.clamped_count,
        )
    }

    fn parse(path: &Path, text: &str) -> Result<(Self, Vec<(String, String)>)> {
        let mut pairs = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("expected key=value, got {line:?}")))?;
            pairs.push((k.to_string(), v.to_string()));
        }
        let get = |key: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::format(path, format!("missing key {key}")))
        };
        macro_rules! field {
            ($key:expr, $ty:ty) => {
                get($key)?.parse::<$ty>().map_err(|e| {
                    Error::format(path, format!("bad value for {}: {e}", $key))
                })?
            };
        }
        let manifest = CloudManifest {
            format_version: field!("format_version", u32),
            seed: field!("seed", u64),
            n_points: field!("n_points", u64),
            psi_min: field!("psi_min", f64),
            psi_max: field!("psi_max", f64),
            n: field!("n", usize),
            chunk_size: field!("chunk_size", u64),
            chunk_count: field!("chunk_count", u64),
            retry_count: field!("retry_count", u64),
            clamped_count: field!("clamped_count", u64),
        };
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported format_version {}", manifest.format_version),
            ));
        }
        Ok((manifest, pairs))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)?;
        Ok(Self::parse(&path, &text)?.0)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), self.to_lines())?;
        Ok(())
    }

    /// SHA-256 of the manifest bytes, hex encoded. Identifies the cloud a
    /// derived artifact was built from.
    pub fn sha256_hex(dir: &Path) -> Result<String> {
        let bytes = fs::read(dir.join(MANIFEST_FILE))?;
        let digest = Sha256::digest(&bytes);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Resume marker: a manifest whose counters cover only the first
/// `chunks_done` chunks.
struct PartialState {
    manifest: CloudManifest,
    chunks_done: u64,
}

impl PartialState {
    fn read(dir: &Path) -> Option<Self> {
        let path = dir.join(PARTIAL_FILE);
        let text = fs::read_to_string(&path).ok()?;
        // An unreadable or stale marker is ignored; generation restarts.
        let (manifest, pairs) = CloudManifest::parse(&path, &text).ok()?;
        let chunks_done = pairs
            .iter()
            .find(|(k, _)| k == "chunks_done")?
            .1
            .parse::<u64>()
            .ok()?;
        Some(Self {
            manifest,
            chunks_done,
        })
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let text = format!(
            "{}chunks_done={}\n",
            self.manifest.to_lines(),
            self.chunks_done
        );
        fs::write(dir.join(PARTIAL_FILE), text)?;
        Ok(())
    }
}

fn chunk_path(dir: &Path, chunk: u64) -> PathBuf {
    dir.join(format!("chunk_{chunk:06}.bin"))
}

/// Generates a cloud into `dir`.
///
/// A completed cloud with the same config is left untouched. A partial run
/// with the same config resumes after its last finished chunk; any other
/// leftover state is regenerated from scratch. The final bytes depend only
/// on the config.
pub fn gen_cloud(config: &CloudConfig, dir: &Path) -> Result<CloudManifest> {
    config.validate()?;
    fs::create_dir_all(dir)?;

    if let Ok(existing) = CloudManifest::read(dir) {
        if existing.matches(config) {
            return Ok(existing);
        }
    }

    let chunk_count = config.chunk_count();
    let mut manifest = CloudManifest {
        format_version: FORMAT_VERSION,
        seed: config.seed,
        n_points: config.n_points,
        psi_min: config.psi_min,
        psi_max: config.psi_max,
        n: config.n,
        chunk_size: config.chunk_size,
        chunk_count,
        retry_count: 0,
        clamped_count: 0,
    };

    let mut start_chunk = 0u64;
    if let Some(partial) = PartialState::read(dir) {
        if partial.manifest.matches(config) && partial.chunks_done <= chunk_count {
            start_chunk = partial.chunks_done;
            manifest.retry_count = partial.manifest.retry_count;
            manifest.clamped_count = partial.manifest.clamped_count;
        }
    }

    for chunk in start_chunk..chunk_count {
        let lo = chunk * config.chunk_size;
        let hi = lo + config.chunk_len(chunk);
        let points: Vec<GenPoint> = (lo..hi)
            .into_par_iter()
            .map(|i| gen_indexed_point(config, i))
            .collect::<Result<_>>()?;

        let file = fs::File::create(chunk_path(dir, chunk))?;
        let mut out = BufWriter::new(file);
        for p in &points {
            let t = p.point();
            out.write_all(&t.psi.to_le_bytes())?;
            out.write_all(&t.psi_hat.to_le_bytes())?;
            out.write_all(&t.w_next.to_le_bytes())?;
        }
        out.flush()?;

        manifest.retry_count += points.iter().map(|p| p.retries as u64).sum::<u64>();
        manifest.clamped_count += points.iter().filter(|p| p.estimate.clamped).count() as u64;
        PartialState {
            manifest: manifest.clone(),
            chunks_done: chunk + 1,
        }
        .write(dir)?;
    }

    manifest.write(dir)?;
    let _ = fs::remove_file(dir.join(PARTIAL_FILE));
    Ok(manifest)
}

/// Read access to a persisted cloud.
pub struct CloudReader {
    dir: PathBuf,
    manifest: CloudManifest,
}

impl CloudReader {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let manifest = CloudManifest::read(&dir)?;
        Ok(Self { dir, manifest })
    }

    pub fn manifest(&self) -> &CloudManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Hex SHA-256 of this cloud's manifest.
    pub fn manifest_hash(&self) -> Result<String> {
        CloudManifest::sha256_hex(&self.dir)
    }

    pub fn chunk_indices(&self) -> std::ops::Range<u64> {
        0..self.manifest.chunk_count
    }

    /// Loads one whole chunk, validating its length.
    pub fn read_chunk(&self, chunk: u64) -> Result<Vec<CloudPoint>> {
        let path = chunk_path(&self.dir, chunk);
        let expect = self.manifest.config().chunk_len(chunk) as usize;
        let mut bytes = Vec::with_capacity(expect * 24);
        fs::File::open(&path)?.read_to_end(&mut bytes)?;
        if bytes.len() != expect * 24 {
            return Err(Error::format(
                &path,
                format!("expected {} bytes, found {}", expect * 24, bytes.len()),
            ));
        }
        let mut points = Vec::with_capacity(expect);
        for row in bytes.chunks_exact(24) {
            let p = CloudPoint {
                psi: f64::from_le_bytes(row[0..8].try_into().unwrap()),
                psi_hat: f64::from_le_bytes(row[8..16].try_into().unwrap()),
                w_next: f64::from_le_bytes(row[16..24].try_into().unwrap()),
            };
            if !(p.psi.is_finite() && p.psi_hat.is_finite() && p.w_next.is_finite()) {
                return Err(Error::format(&path, "non-finite point"));
            }
            points.push(p);
        }
        Ok(points)
    }

    /// Streams every point in generation order.
    pub fn points(&self) -> PointIter<'_> {
        PointIter {
            reader: self,
            chunk: 0,
            buffer: Vec::new(),
            pos: 0,
        }
    }

    /// Applies `map` to each chunk in parallel and folds the results in
    /// chunk order, so the outcome matches a sequential pass.
    pub fn fold_chunks<T, A>(
        &self,
        map: impl Fn(Vec<CloudPoint>) -> Result<T> + Sync,
        mut acc: A,
        mut fold: impl FnMut(&mut A, T),
    ) -> Result<A>
    where
        T: Send,
    {
        let parts: Vec<T> = self
            .chunk_indices()
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|c| self.read_chunk(c).and_then(&map))
            .collect::<Result<_>>()?;
        for part in parts {
            fold(&mut acc, part);
        }
        Ok(acc)
    }

    /// Writes the cloud as CSV with header `psi,psi_hat,w_next`.
    pub fn export_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "psi,psi_hat,w_next")?;
        for point in self.points() {
            let p = point?;
            writeln!(out, "{},{},{}", p.psi, p.psi_hat, p.w_next)?;
        }
        Ok(())
    }
}

/// Iterator over all points of a cloud, chunk by chunk.
pub struct PointIter<'r> {
    reader: &'r CloudReader,
    chunk: u64,
    buffer: Vec<CloudPoint>,
    pos: usize,
}

impl Iterator for PointIter<'_> {
    type Item = Result<CloudPoint>;

    fn next(&mut self) -> Option<Self::Item> {
        while self.pos >= self.buffer.len() {
            if self.chunk >= self.reader.manifest.chunk_count {
                return None;
            }
            match self.reader.read_chunk(self.chunk) {
                Ok(points) => {
                    self.buffer = points;
                    self.pos = 0;
                    self.chunk += 1;
                }
                Err(e) => {
                    self.chunk = self.reader.manifest.chunk_count;
                    return Some(Err(e));
                }
            }
        }
        let p = self.buffer[self.pos];
        self.pos += 1;
        Some(Ok(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU64, Ordering};

    fn test_dir(tag: &str) -> PathBuf {
        static SERIAL: AtomicU64 = AtomicU64::new(0);
        let k = SERIAL.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!(
            "ppp-cloud-{tag}-{}-{k}",
            std::process::id()
        ));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    fn small_config(seed: u64) -> CloudConfig {
        CloudConfig {
            n_points: 1000,
            psi_min: -4.0,
            psi_max: 4.0,
            n: 20,
            seed,
            chunk_size: 256,
        }
    }

    fn chunk_bytes(dir: &Path, manifest: &CloudManifest) -> Vec<Vec<u8>> {
        (0..manifest.chunk_count)
            .map(|c| fs::read(chunk_path(dir, c)).unwrap())
            .collect()
    }

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let a: Vec<f64> = substream(9, 4).random_iter().take(8).collect();
        let b: Vec<f64> = substream(9, 4).random_iter().take(8).collect();
        let c: Vec<f64> = substream(9, 5).random_iter().take(8).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let ok = small_config(1);
        assert!(ok.validate().is_ok());
        for bad in [
            CloudConfig { n_points: 0, ..ok },
            CloudConfig { chunk_size: 0, ..ok },
            CloudConfig { psi_min: 2.0, psi_max: -2.0, ..ok },
            CloudConfig { psi_min: f64::NAN, ..ok },
            CloudConfig { n: 7, ..ok },
            CloudConfig { n: 2, ..ok },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn gen_point_reproduces_hand_assembled_triple() {
        let psi = 0.75f64;
        let params = GpdParams::standard(psi.sinh());
        let n = 20;

        let mut rng = substream(31, 7);
        let p = gen_point(psi, &mut rng, n).unwrap();

        // Replay the same substream by hand.
        let mut replay = substream(31, 7);
        let draws = params.sample(&mut replay, n);
        let sample = OrderedSample::new(draws).unwrap();
        let est = fit_xi(&sample).unwrap();
        let x_next = params.sample(&mut replay, 1)[0];
        let u_next = (x_next - sample.x_mid()) / sample.span();

        assert_eq!(p.estimate.psi_hat, est.psi_hat);
        assert_eq!(p.u_next, u_next);
        assert_eq!(p.w_next, u_next.asinh());
        assert_eq!(p.retries, 0);
    }

    #[test]
    fn triples_ignore_location_and_scale() {
        for stream in 0..20 {
            let psi = -1.2f64;
            let canonical =
                gen_point_at(&GpdParams::standard(psi.sinh()), psi, &mut substream(5, stream), 20)
                    .unwrap();
            let moved = gen_point_at(
                &GpdParams::new(250.0, 3.5e2, psi.sinh()).unwrap(),
                psi,
                &mut substream(5, stream),
                20,
            )
            .unwrap();
            let tol = 1e-9 * canonical.estimate.psi_hat.abs().max(1.0);
            assert!((moved.estimate.psi_hat - canonical.estimate.psi_hat).abs() <= tol);
            let tol = 1e-9 * canonical.w_next.abs().max(1.0);
            assert!((moved.w_next - canonical.w_next).abs() <= tol);
        }
    }

    #[test]
    fn generated_cloud_round_trips_through_the_reader() {
        let dir = test_dir("roundtrip");
        let config = small_config(77);
        let manifest = gen_cloud(&config, &dir).unwrap();
        assert_eq!(manifest.chunk_count, 4);
        assert_eq!(manifest.n_points, 1000);

        let reader = CloudReader::open(&dir).unwrap();
        assert_eq!(reader.manifest(), &manifest);
        let points: Vec<CloudPoint> = reader.points().map(|p| p.unwrap()).collect();
        assert_eq!(points.len(), 1000);
        for p in &points {
            assert!(p.psi >= -4.0 && p.psi <= 4.0);
            assert!(p.psi_hat.abs() <= 4.5);
            assert!(p.w_next.abs() <= W_CAP);
        }
        // Points match direct regeneration by index.
        for &i in &[0u64, 255, 256, 999] {
            let direct = gen_indexed_point(&config, i).unwrap().point();
            assert_eq!(points[i as usize], direct);
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn generation_is_deterministic_and_idempotent() {
        let (d1, d2) = (test_dir("det-a"), test_dir("det-b"));
        let config = small_config(123);
        let m1 = gen_cloud(&config, &d1).unwrap();
        let m2 = gen_cloud(&config, &d2).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(chunk_bytes(&d1, &m1), chunk_bytes(&d2, &m2));

        // Re-running over a complete cloud changes nothing.
        let before = chunk_bytes(&d1, &m1);
        let again = gen_cloud(&config, &d1).unwrap();
        assert_eq!(again, m1);
        assert_eq!(chunk_bytes(&d1, &m1), before);
        fs::remove_dir_all(&d1).unwrap();
        fs::remove_dir_all(&d2).unwrap();
    }

    #[test]
    fn interrupted_generation_resumes_to_identical_bytes() {
        let (full, partial) = (test_dir("resume-full"), test_dir("resume-part"));
        let config = small_config(321);
        let want = gen_cloud(&config, &full).unwrap();

        // Simulate a crash after two chunks: copy them over, drop the rest.
        fs::create_dir_all(&partial).unwrap();
        let mut counters = (0u64, 0u64);
        for c in 0..2u64 {
            fs::copy(chunk_path(&full, c), chunk_path(&partial, c)).unwrap();
            let lo = c * config.chunk_size;
            for i in lo..lo + config.chunk_size {
                let p = gen_indexed_point(&config, i).unwrap();
                counters.0 += p.retries as u64;
                counters.1 += p.estimate.clamped as u64;
            }
        }
        PartialState {
            manifest: CloudManifest {
                retry_count: counters.0,
                clamped_count: counters.1,
                ..want.clone()
            },
            chunks_done: 2,
        }
        .write(&partial)
        .unwrap();

        let resumed = gen_cloud(&config, &partial).unwrap();
        assert_eq!(resumed, want);
        assert_eq!(chunk_bytes(&partial, &resumed), chunk_bytes(&full, &want));
        assert!(!partial.join(PARTIAL_FILE).exists());
        fs::remove_dir_all(&full).unwrap();
        fs::remove_dir_all(&partial).unwrap();
    }

    #[test]
    fn truncated_chunks_are_reported_as_format_errors() {
        let dir = test_dir("corrupt");
        let config = small_config(9);
        gen_cloud(&config, &dir).unwrap();
        let path = chunk_path(&dir, 1);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let reader = CloudReader::open(&dir).unwrap();
        let err = reader.points().collect::<Result<Vec<_>>>().unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn csv_export_matches_the_stored_points() {
        let dir = test_dir("csv");
        let config = CloudConfig {
            n_points: 50,
            chunk_size: 32,
            ..small_config(64)
        };
        gen_cloud(&config, &dir).unwrap();
        let reader = CloudReader::open(&dir).unwrap();
        let mut csv = Vec::new();
        reader.export_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("psi,psi_hat,w_next"));
        let parsed: Vec<CloudPoint> = lines
            .map(|l| {
                let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
                CloudPoint { psi: f[0], psi_hat: f[1], w_next: f[2] }
            })
            .collect();
        let stored: Vec<CloudPoint> = reader.points().map(|p| p.unwrap()).collect();
        assert_eq!(parsed, stored);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn manifest_hash_tracks_content() {
        let (d1, d2) = (test_dir("hash-a"), test_dir("hash-b"));
        gen_cloud(&small_config(1), &d1).unwrap();
        gen_cloud(&small_config(1), &d2).unwrap();
        let h1 = CloudManifest::sha256_hex(&d1).unwrap();
        assert_eq!(h1.len(), 64);
        assert_eq!(h1, CloudManifest::sha256_hex(&d2).unwrap());
        fs::remove_dir_all(&d2).unwrap();
        gen_cloud(&small_config(2), &d2).unwrap();
        assert_ne!(h1, CloudManifest::sha256_hex(&d2).unwrap());
        fs::remove_dir_all(&d1).unwrap();
        fs::remove_dir_all(&d2).unwrap();
    }

    #[test]
    fn clamp_counter_sees_edge_heavy_shapes() {
        let dir = test_dir("clamp");
        let config = CloudConfig {
            n_points: 200,
            psi_min: 4.3,
            psi_max: 4.5,
            chunk_size: 200,
            ..small_config(5)
        };
        let manifest = gen_cloud(&config, &dir).unwrap();
        assert!(
            manifest.clamped_count > 0,
            "expected clamped fits near the bracket edge"
        );
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn psi_marginal_is_roughly_uniform() {
        let dir = test_dir("marginal");
        let config = CloudConfig {
            n_points: 20_000,
            chunk_size: 4096,
            ..small_config(2024)
        };
        gen_cloud(&config, &dir).unwrap();
        let reader = CloudReader::open(&dir).unwrap();
        let mut psis: Vec<f64> = reader.points().map(|p| p.unwrap().psi).collect();
        psis.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let median = psis[psis.len() / 2];
        assert!(median.abs() < 0.15, "median {median}");
        // Quartiles of U(-4, 4) sit near -2 and 2.
        assert!((psis[psis.len() / 4] + 2.0).abs() < 0.15);
        assert!((psis[3 * psis.len() / 4] - 2.0).abs() < 0.15);
        fs::remove_dir_all(&dir).unwrap();
    }
}
