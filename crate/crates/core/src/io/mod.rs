//! Weight files, initialization and image input.

mod image;
mod init;
mod weights;

pub use self::image::{decode_ppm, encode_ppm, load_ppm, preprocess, resize_bilinear, RgbImage, BGR_MEANS, INPUT_HW};
pub use init::xavier_init;
pub use weights::{decode_weights, encode_weights, load_weights, load_weights_into, save_weights, MAGIC, VERSION};
