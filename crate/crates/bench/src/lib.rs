//! Fixtures shared by the benchmarks.

use eigmeta::data::{sample_episode, Episode, EpisodeSpec, RingFamily};
use eigmeta::model::{Architecture, ModelParams};
use eigmeta::rng;
use eigmeta::Matrix;
use rand::Rng;

/// Random symmetric positive definite `n×n` matrix, `BᵀB/n + I`.
pub fn spd(n: usize, seed: u64) -> Matrix {
    let mut rng = rng::stream(seed, &[0xbe, n as u64]);
    let b = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let mut a = b.t_matmul(&b).scale(1.0 / n as f64);
    for i in 0..n {
        a[(i, i)] += 1.0;
    }
    a
}

/// A scatter pair `(S_A, S_N)` of the shape produced by an episode.
pub fn scatter_pair(n: usize, seed: u64) -> (Matrix, Matrix) {
    (spd(n, seed), spd(n, seed.wrapping_add(1)))
}

/// Unit-ish random cotangent of length `n`.
pub fn cotangent(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, &[0xc0, n as u64]);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Parameters and one sampled ring-family episode.
pub struct EpisodeFixture {
    pub params: ModelParams,
    pub episode: Episode,
}

pub fn episode_fixture(hidden: usize, embed_dim: usize, seed: u64) -> EpisodeFixture {
    let family = RingFamily::default();
    let task = family.task(seed, 0);
    let arch = Architecture {
        n_attributes: 2,
        hidden,
        repr_dim: hidden,
        embed_dim,
    };
    let mut params = ModelParams::init(arch, &mut rng::stream(seed, &[0xe1]));
    params.center = vec![0.1; embed_dim];
    let spec = EpisodeSpec::default();
    let episode = sample_episode(&task, 0, &spec, &mut rng::stream(seed, &[0xe2])).expect("ring task supports the default episode");
    EpisodeFixture { params, episode }
}
