//! Shared fixtures for the benchmarks: small deterministic models and
//! inputs sized like the acceptance toys.

use aitok_core::scene::{gen_scene, SceneSpec, SyntheticScene};
use aitok_core::seq::Vocabulary;
use aitok_core::solver::{SolverConfig, SolverModel};
use aitok_core::tokenizer::{TokenizerConfig, TokenizerModel};
use aitok_core::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

pub fn scenes(image_size: usize, n: usize) -> Result<Vec<SyntheticScene>> {
    let spec = SceneSpec { image_size, ..SceneSpec::default() };
    (0..n as u64).map(|s| gen_scene(&spec, s)).collect()
}

/// The 32×32 depth tokenizer of the solver toy (ratio 8, 4×4 grid).
pub fn depth_tokenizer() -> Result<TokenizerModel<f32>> {
    let mut c = TokenizerConfig::depth().with_ratio(8);
    c.code_dim = 16;
    TokenizerModel::build(c, 0)
}

/// The toy depth solver: 32×32 images, 16 depth tokens.
pub fn toy_solver() -> Result<SolverModel<f32>> {
    let config = SolverConfig {
        image_size: 32,
        n_encoder_blocks: 2,
        n_decoder_blocks: 2,
        max_seq_len: 24,
        depth_grid: [4, 4],
        vocab: Vocabulary::default(),
        ..SolverConfig::default()
    };
    SolverModel::build(config, 0)
}
