//! Decoder and controller topologies. Both scale with the image size: the
//! decoder upsamples by 8 through three stride-2 transposed convolutions and
//! the controller downsamples by 4 through two stride-2 convolutions.

use super::{Conv, Layer, Network};
use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use crate::star::Shape;

/// Final activation of a scalar controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    /// Action in (0, 1).
    Sigmoid,
    /// Action in (-1, 1).
    Tanh,
}

fn conv(cin: usize, cout: usize) -> Conv {
    Conv {
        in_channels: cin,
        out_channels: cout,
        kernel_size: 4,
        stride: 2,
        padding: 1,
        weight: vec![0.0; cin * cout * 16],
        bias: vec![0.0; cout],
    }
}

fn dense(n_in: usize, n_out: usize) -> Layer {
    Layer::dense(Matrix::zeros(n_out, n_in), vec![0.0; n_out])
}

/// State (or state plus latent) to `height x width` grayscale image.
/// Weights are zero; call one of the `Network::init_*` methods.
pub fn decoder(input_dim: usize, height: usize, width: usize) -> Result<Network> {
    if height % 8 != 0 || width % 8 != 0 || height == 0 || width == 0 {
        return invalid(format!("decoder image size {height}x{width} must be a positive multiple of 8"));
    }
    let (h0, w0) = (height / 8, width / 8);
    let seed = 3 * h0 * w0;
    Network::new(
        Shape::Flat(input_dim),
        vec![
            dense(input_dim, 32),
            Layer::Relu,
            dense(32, 64),
            Layer::Relu,
            dense(64, seed),
            Layer::Relu,
            Layer::Reshape(Shape::Image { channels: 3, height: h0, width: w0 }),
            Layer::ConvTranspose2d(conv(3, 4)),
            Layer::Relu,
            Layer::ConvTranspose2d(conv(4, 8)),
            Layer::Relu,
            Layer::ConvTranspose2d(conv(8, 1)),
            Layer::Clamp01,
        ],
    )
}

/// Grayscale image to a scalar action.
pub fn controller(height: usize, width: usize, output: OutputActivation) -> Result<Network> {
    if height % 4 != 0 || width % 4 != 0 || height == 0 || width == 0 {
        return invalid(format!("controller image size {height}x{width} must be a positive multiple of 4"));
    }
    let flat = (height / 4) * (width / 4);
    Network::new(
        Shape::Image { channels: 1, height, width },
        vec![
            Layer::Conv2d(conv(1, 4)),
            Layer::Relu,
            Layer::Conv2d(conv(4, 1)),
            Layer::Relu,
            Layer::Flatten,
            dense(flat, 64),
            Layer::Relu,
            dense(64, 1),
            match output {
                OutputActivation::Sigmoid => Layer::Sigmoid,
                OutputActivation::Tanh => Layer::Tanh,
            },
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_compose() {
        let d = decoder(2, 32, 32).unwrap();
        assert_eq!(d.output_shape(), Shape::Image { channels: 1, height: 32, width: 32 });
        let c = controller(32, 32, OutputActivation::Tanh).unwrap();
        assert_eq!(c.output_shape(), Shape::Flat(1));
        assert_eq!(c.shape_at(5), Shape::Flat(64));
        assert_eq!(decoder(4, 96, 96).unwrap().shape_at(7), Shape::Image { channels: 3, height: 12, width: 12 });
        assert!(decoder(2, 30, 32).is_err());
    }
}
