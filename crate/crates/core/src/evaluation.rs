//! Clustering accuracy via cluster heads, reconstruction errors, and
//! latent traversal grids.
//!
//! All metrics run the networks in eval mode and use the mean head for `s`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageSource};
use crate::error::{Error, Result};
use crate::latent::{sample_prior, LatentBatch, LatentConfig};
use crate::networks::{EncoderOutput, Encoded, ModelParams};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What the metrics need from a trained model. Implemented by
/// [`ModelParams`]; tests substitute hand-built stubs.
pub trait Autoencoder<T: Scalar> {
    fn latent(&self) -> &LatentConfig;
    /// `(channels, side)` of generated images.
    fn image_shape(&self) -> (usize, usize);
    fn encode(&self, images: &Tensor<T>) -> Result<EncoderOutput<T>>;
    fn decode(&self, codes: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> Autoencoder<T> for ModelParams<T> {
    fn latent(&self) -> &LatentConfig {
        &self.latent
    }

    fn image_shape(&self) -> (usize, usize) {
        (self.arch.channels, self.arch.image_side)
    }

    fn encode(&self, images: &Tensor<T>) -> Result<EncoderOutput<T>> {
        ModelParams::encode(self, images)
    }

    fn decode(&self, codes: &Tensor<T>) -> Result<Tensor<T>> {
        ModelParams::decode(self, codes)
    }
}

fn disentangled(latent: &LatentConfig, what: &str) -> Result<()> {
    if latent.is_entangled() || latent.kc == 0 {
        return Err(Error::config(format!("{what} needs a categorical latent slot")));
    }
    Ok(())
}

/// Decoder input for category `k` with the given `s` and `n`.
fn code_row<T: Scalar>(latent: &LatentConfig, k: usize, s: &[f64], n: &[f64]) -> Vec<T> {
    let mut row = vec![T::zero(); latent.code_width()];
    row[k] = T::one();
    for (i, &v) in s.iter().enumerate() {
        row[latent.kc + i] = T::lit(v);
    }
    for (i, &v) in n.iter().enumerate() {
        row[latent.kc + latent.ks + i] = T::lit(v);
    }
    row
}

/// One decoded image per category, with `s` and `n` at zero.
pub fn cluster_heads<T: Scalar>(model: &impl Autoencoder<T>) -> Result<Tensor<T>> {
    let latent = model.latent();
    disentangled(latent, "cluster heads")?;
    let codes: Vec<T> = (0..latent.kc).flat_map(|k| code_row(latent, k, &[], &[])).collect();
    model.decode(&Tensor::from_vec(vec![latent.kc, latent.code_width()], codes))
}

/// Label assigned to each category from its nearest training image.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterLabelMap {
    pub labels: Vec<u8>,
    /// Index into the training set of each head's nearest image.
    pub nearest: Vec<usize>,
    /// Squared pixel distance to that image.
    pub distances: Vec<f64>,
}

impl ClusterLabelMap {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of distinct labels used; fewer than the cluster count means
    /// some classes can never be predicted.
    pub fn distinct_labels(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }
}

/// Nearest training image (pixel L2, intensities in [0, 1]) to each head;
/// ties go to the lowest index.
pub fn assign_cluster_labels<T: Scalar>(heads: &Tensor<T>, train: &Dataset) -> Result<ClusterLabelMap> {
    if train.is_empty() {
        return Err(Error::Data("cannot assign cluster labels from an empty set".into()));
    }
    if heads.shape().len() < 2 || heads.row_len() != train.image_len() {
        return Err(Error::shape(format!(
            "heads {:?} do not match {}-pixel training images",
            heads.shape(),
            train.image_len()
        )));
    }
    let mut map = ClusterLabelMap {
        labels: Vec::new(),
        nearest: Vec::new(),
        distances: Vec::new(),
    };
    for k in 0..heads.rows() {
        let head: Vec<f64> = heads.row(k).iter().map(|v| v.as_f64()).collect();
        let mut best = (f64::INFINITY, 0);
        for i in 0..train.len() {
            let mut d = 0.0;
            for (&p, &h) in train.image(i).iter().zip(&head) {
                let e = p as f64 / 255.0 - h;
                d += e * e;
                if d >= best.0 {
                    break;
                }
            }
            if d < best.0 {
                best = (d, i);
            }
        }
        map.labels.push(train.label(best.1));
        map.nearest.push(best.1);
        map.distances.push(best.0);
    }
    Ok(map)
}

/// `argmax c_probs` for every image in `data`, in order.
pub fn predict_clusters<T: Scalar, S: ImageSource<T> + ?Sized>(
    model: &impl Autoencoder<T>,
    data: &S,
    batch_size: usize,
) -> Result<Vec<usize>> {
    disentangled(model.latent(), "cluster prediction")?;
    let mut out = Vec::with_capacity(data.len());
    for idx in index_batches(data.len(), batch_size) {
        match model.encode(&data.images(&idx))? {
            Encoded::Disentangled { c_probs, .. } => out.extend(c_probs.argmax_rows()),
            Encoded::Entangled { .. } => unreachable!("checked above"),
        }
    }
    Ok(out)
}

fn index_batches(n: usize, batch_size: usize) -> impl Iterator<Item = Vec<usize>> {
    let b = batch_size.max(1);
    (0..n.div_ceil(b)).map(move |i| (i * b..((i + 1) * b).min(n)).collect())
}

/// Fraction of `labels` matched by `map.labels[cluster]`.
pub fn accuracy_from_clusters(clusters: &[usize], labels: &[u8], map: &ClusterLabelMap) -> f64 {
    assert_eq!(clusters.len(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let hits = clusters.iter().zip(labels).filter(|(&k, &y)| map.labels[k] == y).count();
    hits as f64 / labels.len() as f64
}

/// Cluster-head classification accuracy on `test`.
pub fn clustering_accuracy<T: Scalar>(
    model: &impl Autoencoder<T>,
    map: &ClusterLabelMap,
    test: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    if map.len() != model.latent().kc {
        return Err(Error::config(format!(
            "label map has {} clusters, model has {}",
            map.len(),
            model.latent().kc
        )));
    }
    let clusters = predict_clusters(model, test, batch_size)?;
    Ok(accuracy_from_clusters(&clusters, test.labels(), map))
}

/// Accuracy under the best one-to-one matching of clusters to labels. A
/// cross-check only; the cluster-head figure is the reported one.
pub fn hungarian_accuracy(clusters: &[usize], labels: &[u8], k: usize) -> f64 {
    assert_eq!(clusters.len(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let n_labels = labels.iter().map(|&y| y as usize + 1).max().unwrap_or(0);
    let side = k.max(n_labels).max(clusters.iter().map(|&c| c + 1).max().unwrap_or(0));
    let mut counts = pathfinding::matrix::Matrix::new(side, side, 0i64);
    for (&c, &y) in clusters.iter().zip(labels) {
        counts[(c, y as usize)] += 1;
    }
    let (hits, _) = pathfinding::kuhn_munkres::kuhn_munkres(&counts);
    hits as f64 / labels.len() as f64
}

/// Mean per-pixel squared error of eval-mode reconstructions, using
/// `c_probs ‖ s_mu ‖ n` as the code.
pub fn reconstruction_mse<T: Scalar, S: ImageSource<T> + ?Sized>(
    model: &impl Autoencoder<T>,
    data: &S,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for idx in index_batches(data.len(), batch_size) {
        let x = data.images(&idx);
        let y = model.decode(&model.encode(&x)?.mean_code())?;
        if y.shape() != x.shape() {
            return Err(Error::shape(format!("reconstruction {:?} vs. input {:?}", y.shape(), x.shape())));
        }
        for (&a, &b) in x.data().iter().zip(y.data()) {
            let e = a.as_f64() - b.as_f64();
            total += e * e;
        }
        count += x.numel();
    }
    if count == 0 {
        return Err(Error::Data("reconstruction error of an empty set".into()));
    }
    Ok(total / count as f64)
}

/// Latent reconstruction error with the columns it covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentMse {
    pub value: f64,
    /// `"c|s"` for the disentangled model (noise excluded), `"z"` otherwise.
    pub compared: String,
    pub samples: usize,
}

/// Draws `samples` prior codes, decodes, re-encodes and averages the
/// squared error over the compared columns.
pub fn latent_reconstruction_mse<T: Scalar>(
    model: &impl Autoencoder<T>,
    samples: usize,
    rng: &mut Stream,
    batch_size: usize,
) -> Result<LatentMse> {
    let latent = model.latent().clone();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut left = samples;
    while left > 0 {
        let b = left.min(batch_size.max(1));
        left -= b;
        let prior: LatentBatch<T> = sample_prior(&latent, b, rng);
        let enc = model.encode(&model.decode(&prior.concat())?)?;
        let pairs = match (&prior, &enc) {
            (LatentBatch::Disentangled { c, s, .. }, Encoded::Disentangled { c_probs, s_mu, .. }) => {
                vec![(c, c_probs), (s, s_mu)]
            }
            (LatentBatch::Entangled { z }, Encoded::Entangled { z: z_hat }) => vec![(z, z_hat)],
            _ => return Err(Error::config("encoder output does not match the latent config")),
        };
        for (a, b) in pairs {
            for (&u, &v) in a.data().iter().zip(b.data()) {
                let e = u.as_f64() - v.as_f64();
                total += e * e;
            }
            count += a.numel();
        }
    }
    Ok(LatentMse {
        value: if count == 0 { 0.0 } else { total / count as f64 },
        compared: if latent.is_entangled() { "z" } else { "c|s" }.into(),
        samples,
    })
}

/// Which slot a traversal sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vary {
    /// Columns are the categories; rows sweep `s[dims.0]`.
    C,
    /// Columns sweep `s[dims.0]`, rows sweep `s[dims.1]`, at `category`.
    S,
    /// Columns sweep `n[dims.0]`, rows sweep `n[dims.1]`, at `category`.
    N,
    /// Entangled model: columns sweep `z[dims.0]`, rows `z[dims.1]`.
    Z,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraversalSpec {
    pub vary: Vary,
    /// Values per swept axis, evenly spaced over `[-extent, extent]`.
    pub steps: usize,
    pub extent: f64,
    pub category: usize,
    pub dims: (usize, usize),
    /// Values of the slots not swept; missing entries are zero.
    pub s: Vec<f64>,
    pub n: Vec<f64>,
    pub z: Vec<f64>,
}

impl Default for TraversalSpec {
    fn default() -> Self {
        TraversalSpec {
            vary: Vary::C,
            steps: 8,
            extent: 2.0,
            category: 0,
            dims: (0, 1),
            s: Vec::new(),
            n: Vec::new(),
            z: Vec::new(),
        }
    }
}

impl TraversalSpec {
    fn values(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![0.0];
        }
        (0..self.steps)
            .map(|i| -self.extent + 2.0 * self.extent * i as f64 / (self.steps - 1) as f64)
            .collect()
    }

    fn validate(&self, latent: &LatentConfig) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("traversal: {m}")));
        if self.steps == 0 || !self.extent.is_finite() {
            return bad("steps must be positive and extent finite".into());
        }
        let (w, name) = match self.vary {
            Vary::C | Vary::S => (latent.ks, "s"),
            Vary::N => (latent.kn, "n"),
            Vary::Z => (latent.entangled_dim.unwrap_or(0), "z"),
        };
        if (self.vary == Vary::Z) != latent.is_entangled() {
            return bad("z traversals apply exactly to the entangled model".into());
        }
        if self.vary != Vary::Z && self.category >= latent.kc {
            return bad(format!("category {} out of range for kc = {}", self.category, latent.kc));
        }
        let second = matches!(self.vary, Vary::S | Vary::N | Vary::Z) && w > 1;
        if self.dims.0 >= w || (second && self.dims.1 >= w) {
            return bad(format!("dims {:?} out of range for {name} of width {w}", self.dims));
        }
        if second && self.dims.0 == self.dims.1 {
            return bad("the two swept dims must differ".into());
        }
        for (v, k, slot) in [(&self.s, latent.ks, "s"), (&self.n, latent.kn, "n")] {
            if v.len() > k && !latent.is_entangled() {
                return bad(format!("{} fixed {slot} values for a width-{k} slot", v.len()));
            }
        }
        if self.z.len() > latent.entangled_dim.unwrap_or(0) {
            return bad("too many fixed z values".into());
        }
        Ok(())
    }
}

/// Decoded images laid out as `rows × cols` tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub side: usize,
    /// `[rows * cols, channels, side, side]`, row-major over tiles.
    pub tiles: Tensor<f64>,
}

pub const SEPARATOR: usize = 2;

impl ImageGrid {
    pub fn tile(&self, row: usize, col: usize) -> &[f64] {
        self.tiles.row(row * self.cols + col)
    }

    /// Rendered size, separators included on every edge.
    pub fn pixel_size(&self) -> (usize, usize) {
        let w = self.cols * self.side + (self.cols + 1) * SEPARATOR;
        let h = self.rows * self.side + (self.rows + 1) * SEPARATOR;
        (w, h)
    }

    /// 8-bit grayscale raster (first channel only), white separators.
    pub fn render(&self) -> Vec<u8> {
        let (w, h) = self.pixel_size();
        let mut out = vec![255u8; w * h];
        let s = self.side;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let tile = self.tile(r, c);
                let (x0, y0) = (SEPARATOR + c * (s + SEPARATOR), SEPARATOR + r * (s + SEPARATOR));
                for y in 0..s {
                    for x in 0..s {
                        let v = tile[y * s + x].clamp(0.0, 1.0);
                        out[(y0 + y) * w + x0 + x] = (v * 255.0).round() as u8;
                    }
                }
            }
        }
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let (w, h) = self.pixel_size();
        let mut bytes = Vec::new();
        let mut enc = png::Encoder::new(&mut bytes, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer
            .write_image_data(&self.render())
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer.finish().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        Ok(bytes)
    }

    /// Binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let (w, h) = self.pixel_size();
        let mut out = Vec::new();
        write!(out, "P5\n{w} {h}\n255\n").unwrap();
        out.extend(self.render());
        out
    }
}

/// Decodes the codes a traversal spec describes, in eval mode.
pub fn traversal_grid<T: Scalar>(model: &impl Autoencoder<T>, spec: &TraversalSpec) -> Result<ImageGrid> {
    let latent = model.latent().clone();
    spec.validate(&latent)?;
    let values = spec.values();
    let fixed = |v: &[f64], w: usize| {
        let mut out = v.to_vec();
        out.resize(w, 0.0);
        out
    };
    let mut codes: Vec<Vec<T>> = Vec::new();
    let (rows, cols);
    match spec.vary {
        Vary::C => {
            rows = values.len();
            cols = latent.kc;
            let n = fixed(&spec.n, latent.kn);
            for &v in &values {
                for k in 0..latent.kc {
                    let mut s = fixed(&spec.s, latent.ks);
                    if latent.ks > 0 && spec.steps > 1 {
                        s[spec.dims.0] = v;
                    }
                    codes.push(code_row(&latent, k, &s, &n));
                }
            }
        }
        Vary::S | Vary::N | Vary::Z => {
            let width = match spec.vary {
                Vary::S => latent.ks,
                Vary::N => latent.kn,
                _ => latent.code_width(),
            };
            cols = values.len();
            rows = if width > 1 { values.len() } else { 1 };
            for r in 0..rows {
                for &cv in &values {
                    let mut s = fixed(&spec.s, latent.ks);
                    let mut n = fixed(&spec.n, latent.kn);
                    let mut z = fixed(&spec.z, width);
                    let target = match spec.vary {
                        Vary::S => &mut s,
                        Vary::N => &mut n,
                        _ => &mut z,
                    };
                    target[spec.dims.0] = cv;
                    if rows > 1 {
                        target[spec.dims.1] = values[r];
                    }
                    codes.push(if spec.vary == Vary::Z {
                        z.iter().map(|&v| T::lit(v)).collect()
                    } else {
                        code_row(&latent, spec.category, &s, &n)
                    });
                }
            }
        }
    }
    let flat: Vec<T> = codes.into_iter().flatten().collect();
    let images = model.decode(&Tensor::from_vec(vec![rows * cols, latent.code_width()], flat))?;
    let (channels, side) = model.image_shape();
    if images.shape() != [rows * cols, channels, side, side] {
        return Err(Error::shape(format!("decoded grid tiles {:?}", images.shape())));
    }
    Ok(ImageGrid {
        rows,
        cols,
        channels,
        side,
        tiles: images.cast(),
    })
}
