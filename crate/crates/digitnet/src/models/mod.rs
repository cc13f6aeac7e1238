//! Model graphs: named parameters, the sequential layer list, a static shape
//! tracer, and exact builders for the three networks (six-block recognizer,
//! generator, discriminator).

mod builders;
mod graph;

pub use builders::{
    build_discriminator, build_generator, build_recognizer, BlockSpec, DiscriminatorSpec,
    GeneratorSpec, RecognizerSpec, SganDiscriminator,
};
pub use graph::{Layer, Mode, ModelGraph, Param, ParamRef};
