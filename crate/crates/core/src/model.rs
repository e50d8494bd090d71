//! A complete sensing/reconstruction model and the image-level pipeline
//! built on it.

use crate::error::{dim_err, Result};
use crate::imaging::{
    denormalize, extract_patches, normalize, overlap_average, patch_origins, GrayImage,
    NormalizationStats, PatchSet,
};
use crate::network::{NetworkConfig, ReconstructionNet};
use crate::numerics::{DenseMatrix, SeededRng, SparseTernaryMatrix};
use crate::projection::SensingWeights;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: NetworkConfig,
    pub stats: NormalizationStats,
    pub sensing: SensingWeights,
    pub net: ReconstructionNet,
}

impl Model {
    /// Fresh model. The generator is consumed for the sensing weights
    /// first (uniform in `+-1/sqrt(n)`), then for the network layers in
    /// order.
    pub fn init(config: NetworkConfig, stats: NormalizationStats, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let (n, m) = (config.n(), config.m());
        let bound = 1.0 / (n as f64).sqrt();
        let theta = DenseMatrix::from_fn(n, m, |_, _| rng.uniform_range(-bound, bound));
        let sensing = SensingWeights::new(theta, config.k())?;
        let mut net = ReconstructionNet::new(&config, rng)?;
        net.scaling.alpha = sensing.alpha().to_vec();
        Ok(Self {
            config,
            stats,
            sensing,
            net,
        })
    }

    /// Re-derives the ternary projection and copies the new scales into the
    /// scaling layer.
    pub fn refresh(&mut self) -> Result<()> {
        self.sensing.refresh()?;
        self.net.scaling.alpha = self.sensing.alpha().to_vec();
        Ok(())
    }

    pub fn projection(&self) -> &SparseTernaryMatrix {
        self.sensing.theta_sb()
    }

    /// Normalizes raw pixel patches and measures them with the ternary
    /// projection.
    pub fn sense_patches(&self, patches: &DenseMatrix) -> Result<DenseMatrix> {
        sense_raw(self.projection(), &self.stats, patches)
    }

    /// Reconstructs raw pixel patches from measurements.
    pub fn decode_patches(&self, measurements: &DenseMatrix) -> Result<DenseMatrix> {
        let normalized = self.net.decode_batch(measurements)?;
        Ok(denormalize(&normalized, &self.stats))
    }

    /// Senses every `stride`-spaced window of the image and rebuilds it by
    /// averaging the overlapping patch reconstructions.
    pub fn reconstruct_image(&self, img: &GrayImage, stride: usize) -> Result<GrayImage> {
        let patches = extract_patches(img, self.config.patch_side, stride)?;
        let measurements = self.sense_patches(&patches.vectors)?;
        let decoded = self.decode_patches(&measurements)?;
        overlap_average(&patches.with_vectors(decoded)?, img.width(), img.height())
    }
}

/// Measurements of raw pixel patches under an arbitrary ternary projection.
pub fn sense_raw(
    projection: &SparseTernaryMatrix,
    stats: &NormalizationStats,
    patches: &DenseMatrix,
) -> Result<DenseMatrix> {
    projection.sense_batch(&normalize(patches, stats))
}

/// Overlap-averages patch vectors laid out on the `stride` grid of a
/// `width x height` canvas.
pub fn reassemble(
    vectors: DenseMatrix,
    side: usize,
    stride: usize,
    width: usize,
    height: usize,
) -> Result<GrayImage> {
    let origins = patch_origins(width, height, side, stride);
    if origins.len() != vectors.rows() {
        return Err(dim_err(format!(
            "{} patch vectors for {} grid positions",
            vectors.rows(),
            origins.len()
        )));
    }
    let set = PatchSet {
        side,
        origins,
        vectors,
    };
    overlap_average(&set, width, height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::psnr;

    fn config() -> NetworkConfig {
        NetworkConfig {
            patch_side: 4,
            sensing_rate: 0.25,
            sparsity_ratio: 0.25,
            hidden_layers: 1,
            hidden_units: 6,
        }
    }

    #[test]
    fn init_is_seeded_and_consistent() {
        let stats = NormalizationStats::new(120.0, 40.0).unwrap();
        let a = Model::init(config(), stats, &mut SeededRng::new(3)).unwrap();
        let b = Model::init(config(), stats, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a.sensing.theta(), b.sensing.theta());
        assert_eq!(a.net, b.net);
        assert_eq!(a.net.scaling.alpha, a.sensing.alpha());
        assert_eq!(a.projection().k(), 4);
    }

    #[test]
    fn mean_image_senses_to_zero() {
        let stats = NormalizationStats::new(0.0, 1.0).unwrap();
        let model = Model::init(config(), stats, &mut SeededRng::new(1)).unwrap();
        let zero = DenseMatrix::zeros(3, 16);
        let y = model.sense_patches(&zero).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruct_image_shapes() {
        let stats = NormalizationStats::new(128.0, 60.0).unwrap();
        let model = Model::init(config(), stats, &mut SeededRng::new(2)).unwrap();
        let pixels = (0..10 * 8).map(|i| (i * 3 % 256) as f64).collect();
        let img = GrayImage::new(10, 8, pixels).unwrap();
        let rec = model.reconstruct_image(&img, 2).unwrap();
        assert_eq!((rec.width(), rec.height()), (10, 8));
        assert!(psnr(&img, &rec).unwrap().is_finite());
        assert_eq!(rec, model.reconstruct_image(&img, 2).unwrap());
    }

    #[test]
    fn reassemble_checks_grid() {
        assert!(reassemble(DenseMatrix::zeros(3, 4), 2, 2, 4, 4).is_err());
        let img = reassemble(DenseMatrix::from_vec(4, 4, vec![5.0; 16]).unwrap(), 2, 2, 4, 4).unwrap();
        assert_eq!(img.pixels(), &[5.0; 16]);
    }
}
