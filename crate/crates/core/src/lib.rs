//! Salient-region detection in crowd video from the finite-time instability of the
//! temporally averaged optical-flow field.
//!
//! The pipeline runs window by window: dense optical flow is averaged over `tau` frames,
//! particles are advected through the mean field with RK4, the flow-map Jacobian gives a
//! per-point stretching exponent, and unstable responses are magnified and segmented into
//! labelled regions.
//!
//! Numeric kernels are generic over [`Real`] (`f32` or `f64`); the aliases below fix the
//! scalar to `f64`, which is what the pipeline uses.

pub mod advection;
pub mod field;
pub mod flow;
pub mod io;
pub mod pipeline;
pub mod saliency;
pub mod scalar;
pub mod stability;
pub mod synth;

pub use field::{
    gradient_central, sample_bilinear, BoundaryPolicy, FieldError, GridShape, ScalarField, VectorField2,
};
pub use advection::{advect_grid, advect_point, AdvectionConfig, AdvectionError, FlowMap};
pub use flow::{estimate_flow, FlowError, FlowParams, Frame, MeanFlowAccumulator, SlidingMeanFlow};
pub use saliency::{
    detect, extract_regions, magnify, segment, select_alpha, AlphaMode, BBox, CombineMode,
    Region, SaliencyConfig, SaliencyError, SalientRegionSet,
};
pub use scalar::Real;
pub use stability::{
    compute_stability, jacobian_of_flow_map, max_eigenvalue_ctc, stability_exponent,
    JacobianField, StabilityError, StabilityField,
};
pub use pipeline::{run_pipeline, InputSource, PipelineConfig, PipelineError, RunSummary, WindowReport};
pub use synth::{fixture, render_field, render_frames, Element, GroundTruth, SceneSpec, SynthError};

pub type VectorField2f64 = field::VectorField2<f64>;
pub type VectorField2f32 = field::VectorField2<f32>;
pub type ScalarFieldf64 = field::ScalarField<f64>;
pub type ScalarFieldf32 = field::ScalarField<f32>;
pub type StabilityFieldf64 = stability::StabilityField<f64>;
pub type AdvectionConfigf64 = advection::AdvectionConfig<f64>;
pub type SaliencyConfigf64 = saliency::SaliencyConfig<f64>;
pub type FlowParamsf64 = flow::FlowParams<f64>;
pub type Framef64 = flow::Frame<f64>;
