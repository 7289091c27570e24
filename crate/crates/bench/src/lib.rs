//! Shared fixtures for the criterion benchmarks.

use dprompt_core::data::Image;
use dprompt_core::encoder::{
    DomainEncoder, DomainProjection, DomainProvenance, EncoderDims, TextEncoder, VisionEncoder,
};
use dprompt_core::params::ParamStore;
use dprompt_core::prompt::{init_prompt_params, AlphaInit, PromptConfig};
use dprompt_core::rng::Stream;

pub struct BenchModel {
    pub dims: EncoderDims,
    pub pcfg: PromptConfig,
    pub store: ParamStore,
    pub image: Image,
}

/// Default-scale model with every parameter group populated.
pub fn bench_model() -> BenchModel {
    let dims = EncoderDims::default();
    let pcfg = PromptConfig::default();
    let init = Stream::new("bench-init", 0);
    let mut store = ParamStore::new();
    VisionEncoder::new(dims).init(&mut store, &init.fork("v"));
    TextEncoder::new(dims).init(&mut store, &init.fork("t"));
    DomainEncoder::new(dims, DomainProvenance::SeededRandom).init(&mut store, &init.fork("d"));
    DomainProjection::new(&dims).init(&mut store, &init.fork("p"));
    init_prompt_params(
        &mut store,
        &dims,
        &pcfg,
        AlphaInit::SmallRandom,
        &init.fork("q"),
    );
    let mut data = Stream::new("bench-data", 0);
    let image = Image {
        pixels: data.normal_vec(dims.img * dims.img),
    };
    BenchModel {
        dims,
        pcfg,
        store,
        image,
    }
}
