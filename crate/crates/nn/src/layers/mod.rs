mod conv;
mod dense;
mod gru;
mod norm;

pub use conv::{conv_out, Conv2d, Conv2dCache, ConvTranspose2d, ConvTranspose2dCache};
pub use dense::{Dense, DenseCache};
pub use gru::{GruCache, GruCell};
pub use norm::{relu, relu_backward, LayerNorm, LayerNormCache, LAYER_NORM_EPS};
