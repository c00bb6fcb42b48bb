//! Image pre-processing: per-channel histogram equalization, PPL/XPL layer
//! stacking, PCA fusion into the comprehensive image (CI), and normalization.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// What an image depicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    /// Plane-polarized light.
    Ppl,
    /// Crossed-polarized light.
    Xpl,
    /// Six-layer PPL+XPL stack.
    Composite6,
    /// Comprehensive image built from the leading principal components.
    Ci,
}

impl Role {
    /// The three roles that feed a classification branch, in branch order.
    pub const BRANCHES: [Role; 3] = [Role::Ppl, Role::Xpl, Role::Ci];

    pub fn channels(self) -> usize {
        match self {
            Role::Composite6 => 6,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Ppl => "ppl",
            Role::Xpl => "xpl",
            Role::Composite6 => "composite6",
            Role::Ci => "ci",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Role::Ppl => 0,
            Role::Xpl => 1,
            Role::Composite6 => 2,
            Role::Ci => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Role> {
        [Role::Ppl, Role::Xpl, Role::Composite6, Role::Ci]
            .get(tag as usize)
            .copied()
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ppl" => Ok(Role::Ppl),
            "xpl" => Ok(Role::Xpl),
            "composite6" => Ok(Role::Composite6),
            "ci" => Ok(Role::Ci),
            other => Err(Error::invalid(format!("unknown image role {other:?}"))),
        }
    }
}

/// Pixel storage: raw 8-bit or unit-interval floats after normalization.
#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    Bytes(Vec<u8>),
    Unit(Vec<f64>),
}

impl Samples {
    fn len(&self) -> usize {
        match self {
            Samples::Bytes(v) => v.len(),
            Samples::Unit(v) => v.len(),
        }
    }
}

/// `height × width × channels` raster, channel-interleaved, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    role: Role,
    samples: Samples,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, role: Role, samples: Samples) -> Result<Self> {
        let channels = role.channels();
        if height == 0 || width == 0 {
            return Err(Error::Empty(format!("{role} image has no pixels")));
        }
        if samples.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{height}x{width}x{channels} {role} image needs {} samples, got {}",
                height * width * channels,
                samples.len()
            )));
        }
        if let Samples::Unit(v) = &samples {
            if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::invalid(format!("normalized sample {bad} outside [0, 1]")));
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            role,
            samples,
        })
    }

    pub fn from_bytes(height: usize, width: usize, role: Role, data: Vec<u8>) -> Result<Self> {
        Self::new(height, width, role, Samples::Bytes(data))
    }

    pub fn from_unit(height: usize, width: usize, role: Role, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, role, Samples::Unit(data))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn samples(&self) -> &Samples {
        &self.samples
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn is_normalized(&self) -> bool {
        matches!(self.samples, Samples::Unit(_))
    }

    /// Sample as a unit-interval value (8-bit samples are divided by 255).
    pub fn unit_value(&self, index: usize) -> f64 {
        match &self.samples {
            Samples::Bytes(v) => v[index] as f64 / 255.0,
            Samples::Unit(v) => v[index],
        }
    }

    /// Sample on its stored scale (0..=255 for 8-bit, 0..=1 when normalized).
    pub fn raw_value(&self, index: usize) -> f64 {
        match &self.samples {
            Samples::Bytes(v) => v[index] as f64,
            Samples::Unit(v) => v[index],
        }
    }

    pub fn with_role(mut self, role: Role) -> Result<Self> {
        if role.channels() != self.channels {
            return Err(Error::shape(format!(
                "cannot relabel a {}-channel image as {role}",
                self.channels
            )));
        }
        self.role = role;
        Ok(self)
    }

    /// Rounds normalized samples back to 8-bit; 8-bit images are returned as is.
    pub fn quantize(&self) -> RasterImage {
        match &self.samples {
            Samples::Bytes(_) => self.clone(),
            Samples::Unit(v) => RasterImage {
                samples: Samples::Bytes(v.iter().map(|&x| (x * 255.0).round() as u8).collect()),
                ..*self
            },
        }
    }

    /// Copies a `height × width` window starting at (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<RasterImage> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::shape(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{} image",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let rows = top..top + height;
        let span = |y: usize| (y * self.width + left) * c..(y * self.width + left + width) * c;
        let samples = match &self.samples {
            Samples::Bytes(v) => Samples::Bytes(rows.flat_map(|y| v[span(y)].iter().copied()).collect()),
            Samples::Unit(v) => Samples::Unit(rows.flat_map(|y| v[span(y)].iter().copied()).collect()),
        };
        RasterImage::new(height, width, self.role, samples)
    }
}

fn require_bytes<'a>(image: &'a RasterImage, what: &str) -> Result<&'a [u8]> {
    match &image.samples {
        Samples::Bytes(v) => Ok(v),
        Samples::Unit(_) => Err(Error::invalid(format!("{what} needs 8-bit samples"))),
    }
}

/// Per-channel histogram equalization of an 8-bit image.
///
/// Value `v` maps to `round((cdf(v) − cdf_min) / (N − cdf_min) · 255)`.
/// A constant channel has nothing to redistribute and is returned unchanged.
pub fn histogram_equalize(image: &RasterImage) -> Result<RasterImage> {
    let data = require_bytes(image, "histogram equalization")?;
    let c = image.channels;
    let n = image.pixel_count();
    let mut out = data.to_vec();
    for ch in 0..c {
        let mut hist = [0usize; 256];
        for px in data.iter().skip(ch).step_by(c) {
            hist[*px as usize] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut running = 0;
        for (v, count) in hist.iter().enumerate() {
            running += count;
            cdf[v] = running;
        }
        let cdf_min = cdf[hist.iter().position(|&h| h > 0).expect("non-empty channel")];
        if cdf_min == n {
            continue;
        }
        let denom = (n - cdf_min) as f64;
        let lut: Vec<u8> = cdf
            .iter()
            .map(|&cv| ((cv.saturating_sub(cdf_min)) as f64 / denom * 255.0).round() as u8)
            .collect();
        for px in out.iter_mut().skip(ch).step_by(c) {
            *px = lut[*px as usize];
        }
    }
    RasterImage::new(image.height, image.width, image.role, Samples::Bytes(out))
}

/// Stacks PPL and XPL into six layers ordered `[PPL_R, PPL_G, PPL_B, XPL_R, XPL_G, XPL_B]`.
pub fn stack_layers(ppl: &RasterImage, xpl: &RasterImage) -> Result<RasterImage> {
    if ppl.channels != 3 || xpl.channels != 3 {
        return Err(Error::shape("layer stacking needs two 3-channel images"));
    }
    if (ppl.height, ppl.width) != (xpl.height, xpl.width) {
        return Err(Error::shape(format!(
            "PPL is {}x{} but XPL is {}x{}",
            ppl.height, ppl.width, xpl.height, xpl.width
        )));
    }
    fn interleave<T: Copy>(a: &[T], b: &[T]) -> Vec<T> {
        a.chunks_exact(3)
            .zip(b.chunks_exact(3))
            .flat_map(|(p, x)| p.iter().chain(x).copied())
            .collect()
    }
    let samples = match (&ppl.samples, &xpl.samples) {
        (Samples::Bytes(a), Samples::Bytes(b)) => Samples::Bytes(interleave(a, b)),
        (Samples::Unit(a), Samples::Unit(b)) => Samples::Unit(interleave(a, b)),
        _ => return Err(Error::invalid("PPL and XPL differ in sample encoding")),
    };
    RasterImage::new(ppl.height, ppl.width, Role::Composite6, samples)
}

/// Inverse of [`stack_layers`].
pub fn split_composite(composite: &RasterImage) -> Result<(RasterImage, RasterImage)> {
    if composite.role != Role::Composite6 {
        return Err(Error::invalid(format!(
            "expected a composite6 image, got {}",
            composite.role
        )));
    }
    fn halves<T: Copy>(v: &[T]) -> (Vec<T>, Vec<T>) {
        let mut a = Vec::with_capacity(v.len() / 2);
        let mut b = Vec::with_capacity(v.len() / 2);
        for px in v.chunks_exact(6) {
            a.extend_from_slice(&px[..3]);
            b.extend_from_slice(&px[3..]);
        }
        (a, b)
    }
    let (h, w) = (composite.height, composite.width);
    match &composite.samples {
        Samples::Bytes(v) => {
            let (a, b) = halves(v);
            Ok((
                RasterImage::from_bytes(h, w, Role::Ppl, a)?,
                RasterImage::from_bytes(h, w, Role::Xpl, b)?,
            ))
        }
        Samples::Unit(v) => {
            let (a, b) = halves(v);
            Ok((
                RasterImage::from_unit(h, w, Role::Ppl, a)?,
                RasterImage::from_unit(h, w, Role::Xpl, b)?,
            ))
        }
    }
}

pub const COMPOSITE_CHANNELS: usize = 6;
/// Principal components kept for the CI.
pub const CI_COMPONENTS: usize = 3;

/// Eigen-decomposition of a composite image's channel covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: [f64; COMPOSITE_CHANNELS],
    /// `components[k]` is the k-th principal direction (a column of the eigenvector matrix).
    pub components: [[f64; COMPOSITE_CHANNELS]; COMPOSITE_CHANNELS],
    /// Descending, non-negative.
    pub eigenvalues: [f64; COMPOSITE_CHANNELS],
}

/// Sample covariance of the composite's channels, divisor `N − 1`.
pub fn channel_covariance(
    composite: &RasterImage,
) -> Result<(
    [f64; COMPOSITE_CHANNELS],
    [[f64; COMPOSITE_CHANNELS]; COMPOSITE_CHANNELS],
)> {
    const C: usize = COMPOSITE_CHANNELS;
    if composite.channels != C {
        return Err(Error::shape(format!(
            "PCA needs a 6-channel composite, got {} channels",
            composite.channels
        )));
    }
    let n = composite.pixel_count();
    if n <= C {
        return Err(Error::invalid(format!(
            "PCA over {C} channels needs more than {C} pixels, got {n}"
        )));
    }
    let mut mean = [0.0; C];
    for p in 0..n {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += composite.raw_value(p * C + c);
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = [[0.0; C]; C];
    let mut centered = [0.0; C];
    for p in 0..n {
        for (c, v) in centered.iter_mut().enumerate() {
            *v = composite.raw_value(p * C + c) - mean[c];
        }
        for i in 0..C {
            for j in i..C {
                cov[i][j] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..C {
        for j in i..C {
            cov[i][j] /= (n - 1) as f64;
            cov[j][i] = cov[i][j];
        }
    }
    Ok((mean, cov))
}

/// Relative off-diagonal norm at which Jacobi sweeps stop.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
///
/// Returns eigenvalues and the matrix whose columns are the eigenvectors,
/// unsorted.
pub fn jacobi_eigen<const N: usize>(matrix: &[[f64; N]; N]) -> ([f64; N], [[f64; N]; N]) {
    let mut a = *matrix;
    let mut v = [[0.0; N]; N];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let off_norm = |a: &[[f64; N]; N]| {
        let mut s = 0.0;
        for i in 0..N {
            for j in 0..N {
                if i != j {
                    s += a[i][j] * a[i][j];
                }
            }
        }
        s.sqrt()
    };
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_norm(&a) < JACOBI_TOLERANCE * scale {
            break;
        }
        for p in 0..N {
            for q in p + 1..N {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← Jᵀ A J with J the (p, q) rotation.
                for k in 0..N {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..N {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                a[p][q] = 0.0;
                a[q][p] = 0.0;
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut values = [0.0; N];
    for (i, val) in values.iter_mut().enumerate() {
        *val = a[i][i];
    }
    (values, v)
}

/// Fits a PCA to the pixels of one composite image, each pixel a 6-vector.
pub fn pca_fit(composite: &RasterImage) -> Result<PcaModel> {
    const C: usize = COMPOSITE_CHANNELS;
    let (mean, cov) = channel_covariance(composite)?;
    let (values, vectors) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..C).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let mut components = [[0.0; C]; C];
    let mut eigenvalues = [0.0; C];
    for (k, &src) in order.iter().enumerate() {
        let mut col: [f64; C] = std::array::from_fn(|r| vectors[r][src]);
        let mut lead = 0;
        for r in 1..C {
            if col[r].abs() > col[lead].abs() {
                lead = r;
            }
        }
        if col[lead] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        components[k] = col;
        // Rounding can leave a PSD matrix's zero eigenvalues slightly negative.
        eigenvalues[k] = values[src].max(0.0);
    }
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
    })
}

/// Principal-component scores `Eᵀ(x − mean)` for the first `count` components,
/// one vector per component over all pixels.
pub fn pca_scores(composite: &RasterImage, model: &PcaModel, count: usize) -> Result<Vec<Vec<f64>>> {
    const C: usize = COMPOSITE_CHANNELS;
    if composite.channels != C {
        return Err(Error::shape("PCA projection needs a 6-channel composite"));
    }
    if count > C {
        return Err(Error::invalid(format!("at most {C} components exist")));
    }
    let n = composite.pixel_count();
    let mut scores = vec![Vec::with_capacity(n); count];
    let mut centered = [0.0; C];
    for p in 0..n {
        for (c, v) in centered.iter_mut().enumerate() {
            *v = composite.raw_value(p * C + c) - model.mean[c];
        }
        for (k, out) in scores.iter_mut().enumerate() {
            out.push(model.components[k].iter().zip(&centered).map(|(e, x)| e * x).sum());
        }
    }
    Ok(scores)
}

/// Score ranges at or below this are treated as constant and map to zero.
pub const DEGENERATE_RANGE: f64 = 1e-9;

/// Projects a composite onto its first three principal components and
/// min-max rescales each to `[0, 1]`, giving the normalized CI.
pub fn pca_project_ci(composite: &RasterImage, model: &PcaModel) -> Result<RasterImage> {
    let scores = pca_scores(composite, model, CI_COMPONENTS)?;
    let n = composite.pixel_count();
    let mut out = vec![0.0; n * CI_COMPONENTS];
    for (k, channel) in scores.iter().enumerate() {
        let lo = channel.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = channel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range <= DEGENERATE_RANGE {
            continue;
        }
        for (p, &s) in channel.iter().enumerate() {
            out[p * CI_COMPONENTS + k] = ((s - lo) / range).clamp(0.0, 1.0);
        }
    }
    RasterImage::from_unit(composite.height, composite.width, Role::Ci, out)
}

/// Scales 8-bit samples into `[0, 1]`; normalized images pass through.
pub fn normalize(image: &RasterImage) -> RasterImage {
    match &image.samples {
        Samples::Unit(_) => image.clone(),
        Samples::Bytes(v) => RasterImage {
            samples: Samples::Unit(v.iter().map(|&b| b as f64 / 255.0).collect()),
            ..*image
        },
    }
}

/// The three branch inputs derived from one PPL/XPL pair, stored 8-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedPair {
    pub ppl: RasterImage,
    pub xpl: RasterImage,
    pub ci: RasterImage,
}

impl ProcessedPair {
    pub fn get(&self, role: Role) -> &RasterImage {
        match role {
            Role::Ppl => &self.ppl,
            Role::Xpl => &self.xpl,
            Role::Ci => &self.ci,
            Role::Composite6 => panic!("a processed pair holds no composite"),
        }
    }
}

/// Full pre-processing of one PPL/XPL pair: equalize both, stack, fit PCA on
/// this pair alone, and build the CI. The CI is quantized to 8 bits so the
/// result is exactly what a round trip through raster files reproduces;
/// [`normalize`] is applied when patches are cut.
pub fn preprocess_pair(ppl: &RasterImage, xpl: &RasterImage) -> Result<ProcessedPair> {
    let ppl = histogram_equalize(&ppl.clone().with_role(Role::Ppl)?)?;
    let xpl = histogram_equalize(&xpl.clone().with_role(Role::Xpl)?)?;
    let composite = stack_layers(&ppl, &xpl)?;
    let model = pca_fit(&composite)?;
    let ci = pca_project_ci(&composite, &model)?.quantize();
    Ok(ProcessedPair { ppl, xpl, ci })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rgb_from_channel(values: &[u8]) -> RasterImage {
        let data = values.iter().flat_map(|&v| [v, v, v]).collect();
        RasterImage::from_bytes(1, values.len(), Role::Ppl, data).unwrap()
    }

    fn channel(image: &RasterImage, c: usize) -> Vec<f64> {
        (0..image.pixel_count())
            .map(|p| image.raw_value(p * image.channels() + c))
            .collect()
    }

    #[test]
    fn raster_invariants() {
        assert!(RasterImage::from_bytes(2, 2, Role::Ppl, vec![0; 12]).is_ok());
        assert!(RasterImage::from_bytes(2, 2, Role::Ppl, vec![0; 24]).is_err());
        assert!(RasterImage::from_bytes(2, 2, Role::Composite6, vec![0; 24]).is_ok());
        assert!(RasterImage::from_unit(1, 1, Role::Ci, vec![0.0, 1.5, 0.0]).is_err());
        assert!(RasterImage::from_bytes(0, 2, Role::Ppl, vec![]).is_err());
    }

    #[test]
    fn equalize_four_levels() {
        let out = histogram_equalize(&rgb_from_channel(&[0, 1, 2, 3])).unwrap();
        assert_eq!(channel(&out, 0), vec![0.0, 85.0, 170.0, 255.0]);
        assert_eq!(channel(&out, 2), vec![0.0, 85.0, 170.0, 255.0]);
    }

    #[test]
    fn equalize_constant_channel_unchanged() {
        let img = rgb_from_channel(&[77; 9]);
        assert_eq!(histogram_equalize(&img).unwrap(), img);
    }

    #[test]
    fn equalize_uniform_histogram_stays_uniform() {
        let values: Vec<u8> = (0..=255).collect();
        let out = histogram_equalize(&rgb_from_channel(&values)).unwrap();
        let mut hist = [0; 256];
        for v in channel(&out, 1) {
            hist[v as usize] += 1;
        }
        assert!(hist.iter().all(|&h| h == 1));
    }

    #[test]
    fn equalize_rejects_normalized_input() {
        let img = normalize(&rgb_from_channel(&[1, 2]));
        assert!(histogram_equalize(&img).is_err());
    }

    #[test]
    fn stack_order_and_split() {
        let ppl = RasterImage::from_bytes(2, 2, Role::Ppl, (0..12).collect()).unwrap();
        let xpl = RasterImage::from_bytes(2, 2, Role::Xpl, (100..112).collect()).unwrap();
        let comp = stack_layers(&ppl, &xpl).unwrap();
        assert_eq!(comp.role(), Role::Composite6);
        assert_eq!(
            comp.samples(),
            &Samples::Bytes(vec![
                0, 1, 2, 100, 101, 102, 3, 4, 5, 103, 104, 105, 6, 7, 8, 106, 107, 108, 9, 10, 11, 109, 110, 111
            ])
        );
        let (p, x) = split_composite(&comp).unwrap();
        assert_eq!((p, x), (ppl, xpl));

        let big = RasterImage::from_bytes(3, 3, Role::Xpl, vec![0; 27]).unwrap();
        assert!(matches!(stack_layers(&ppl_2x2(), &big), Err(Error::Shape(_))));
    }

    fn ppl_2x2() -> RasterImage {
        RasterImage::from_bytes(2, 2, Role::Ppl, vec![9; 12]).unwrap()
    }

    fn composite_from_rows(rows: &[[f64; 6]]) -> RasterImage {
        let data = rows.iter().flatten().copied().collect();
        RasterImage::from_unit(1, rows.len(), Role::Composite6, data).unwrap()
    }

    #[test]
    fn pca_axis_aligned_covariance() {
        // Balanced ±a / ±b design scaled so the N−1 covariance is
        // diag(4, 1, 0, 0, 0, 0) · 0.01 (unit samples cannot reach variance 4).
        let n: f64 = 8.0;
        let a = (4.0 * (n - 1.0) / n).sqrt();
        let b = ((n - 1.0) / n).sqrt();
        let mut rows = Vec::new();
        for &sa in &[1.0, -1.0] {
            for &sb in &[1.0, -1.0] {
                for _ in 0..2 {
                    rows.push([0.5 + 0.1 * sa * a, 0.5 + 0.1 * sb * b, 0.3, 0.3, 0.3, 0.3]);
                }
            }
        }
        let model = pca_fit(&composite_from_rows(&rows)).unwrap();
        assert!((model.eigenvalues[0] - 0.04).abs() < 1e-12);
        assert!((model.eigenvalues[1] - 0.01).abs() < 1e-12);
        assert!(model.eigenvalues[2..].iter().all(|&l| l.abs() < 1e-15));
        assert!((model.components[0][0] - 1.0).abs() < 1e-12);
        assert!((model.components[1][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pca_rank_three_when_xpl_duplicates_ppl() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ppl: Vec<u8> = (0..300).map(|_| rng.gen()).collect();
        let ppl = RasterImage::from_bytes(10, 10, Role::Ppl, ppl).unwrap();
        let xpl = ppl.clone().with_role(Role::Xpl).unwrap();
        let model = pca_fit(&stack_layers(&ppl, &xpl).unwrap()).unwrap();
        let scale = model.eigenvalues[0];
        assert!(model.eigenvalues[3..].iter().all(|&l| l < 1e-10 * scale));
        assert!(model.eigenvalues[2] > 1e-3 * scale);
    }

    #[test]
    fn pca_constant_image() {
        let comp = RasterImage::from_bytes(4, 4, Role::Composite6, vec![42; 96]).unwrap();
        let model = pca_fit(&comp).unwrap();
        assert!(model.eigenvalues.iter().all(|&l| l == 0.0));
        let ci = pca_project_ci(&comp, &model).unwrap();
        assert_eq!(ci.role(), Role::Ci);
        assert_eq!(ci.samples(), &Samples::Unit(vec![0.0; 48]));
    }

    #[test]
    fn pca_needs_more_pixels_than_channels() {
        let comp = RasterImage::from_bytes(2, 3, Role::Composite6, vec![1; 36]).unwrap();
        assert!(pca_fit(&comp).is_err());
        let comp = RasterImage::from_bytes(7, 1, Role::Composite6, (0..42).collect()).unwrap();
        assert!(pca_fit(&comp).is_ok());
    }

    #[test]
    fn ci_scores_decorrelated_with_eigenvalue_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows: Vec<[f64; 6]> = (0..200)
            .map(|_| {
                let base: f64 = rng.gen();
                std::array::from_fn(|c| (0.3 * base + 0.7 * rng.gen::<f64>() * (c + 1) as f64 / 6.0).min(1.0))
            })
            .collect();
        let comp = composite_from_rows(&rows);
        let model = pca_fit(&comp).unwrap();
        let scores = pca_scores(&comp, &model, 3).unwrap();
        let n = scores[0].len() as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
        let cov = |a: &[f64], b: &[f64]| {
            let (ma, mb) = (mean(a), mean(b));
            a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
        };
        for i in 0..3 {
            assert!((cov(&scores[i], &scores[i]) - model.eigenvalues[i]).abs() < 1e-9);
            for j in i + 1..3 {
                assert!(cov(&scores[i], &scores[j]).abs() < 1e-8);
            }
        }
        let ci = pca_project_ci(&comp, &model).unwrap();
        for c in 0..3 {
            let ch = channel(&ci, c);
            assert_eq!(ch.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
            assert_eq!(ch.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        }
    }

    #[test]
    fn jacobi_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut m = [[0.0; 6]; 6];
        for i in 0..6 {
            for j in i..6 {
                m[i][j] = rng.gen_range(-5.0..5.0);
                m[j][i] = m[i][j];
            }
        }
        let (mut ours, _) = jacobi_eigen(&m);
        ours.sort_by(f64::total_cmp);
        let reference = nalgebra::Matrix6::from_fn(|i, j| m[i][j]).symmetric_eigenvalues();
        let mut theirs: Vec<f64> = reference.iter().copied().collect();
        theirs.sort_by(f64::total_cmp);
        for (a, b) in ours.iter().zip(&theirs) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn normalize_endpoints_and_idempotence() {
        let img = RasterImage::from_bytes(1, 1, Role::Xpl, vec![0, 255, 51]).unwrap();
        let n = normalize(&img);
        assert_eq!(n.samples(), &Samples::Unit(vec![0.0, 1.0, 0.2]));
        assert_eq!(n.role(), Role::Xpl);
        assert_eq!(normalize(&n), n);
        assert_eq!(n.quantize(), img);
    }

    #[test]
    fn preprocess_pair_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let ppl = RasterImage::from_bytes(8, 8, Role::Ppl, (0..192).map(|_| rng.gen()).collect()).unwrap();
        let xpl = RasterImage::from_bytes(8, 8, Role::Xpl, (0..192).map(|_| rng.gen()).collect()).unwrap();
        let a = preprocess_pair(&ppl, &xpl).unwrap();
        let b = preprocess_pair(&ppl, &xpl).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ci.role(), Role::Ci);
        assert!(!a.ci.is_normalized());
    }

    proptest! {
        #[test]
        fn equalization_is_monotone(data in proptest::collection::vec(any::<u8>(), 3..300)) {
            let px = data.len() / 3;
            let img = RasterImage::from_bytes(1, px, Role::Ppl, data[..px * 3].to_vec()).unwrap();
            let out = histogram_equalize(&img).unwrap();
            for c in 0..3 {
                let inp = channel(&img, c);
                let res = channel(&out, c);
                for i in 0..px {
                    for j in 0..px {
                        if inp[i] <= inp[j] {
                            prop_assert!(res[i] <= res[j]);
                        }
                    }
                }
            }
        }
    }
}
