//! Network building blocks: parameter tables, the transformer encoder
//! contextualizer, the toy clip backbone and the optimizer.

pub mod backbone;
pub mod optim;
pub mod params;
pub mod txe;

pub use backbone::{backbone_encode, Backbone, BackboneConfig};
pub use optim::SgdMomentum;
pub use params::{Bound, Linear, ParamId, ParamStore};
pub use txe::{mhsa_forward, txe_forward, Mode, TxE, TxEConfig};
