//! Parameter registration and graph-building helpers for the layer shapes
//! used throughout the attention modules: 1x1/kxk convolutions with batch
//! norm, plain convolutions, and fully connected maps.

use rga_tensor::{NodeId, ParameterSet, Scalar, Session, StreamRng, Tensor};

use crate::error::Result;

/// Draws a `(fan_out, fan_in, ...)`-shaped tensor from the zero-mean uniform
/// distribution with half-width `1 / sqrt(fan_in)`.
pub fn uniform_init<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.uniform_in(-bound, bound)))
}

/// Convolution weights plus batch-norm parameters and running buffers under
/// `<prefix>.{weight,gamma,beta,running_mean,running_var}`.
pub fn register_conv_bn<T: Scalar>(
    ps: &mut ParameterSet<T>,
    rng: &mut StreamRng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) -> Result<()> {
    let fan_in = c_in * k * k;
    ps.add_trainable(
        &format!("{prefix}.weight"),
        uniform_init(&[c_out, c_in, k, k], fan_in, rng),
    )?;
    register_bn(ps, prefix, c_out)
}

/// Batch-norm parameters alone (gamma=1, beta=0, running stats at identity).
pub fn register_bn<T: Scalar>(ps: &mut ParameterSet<T>, prefix: &str, c: usize) -> Result<()> {
    ps.add_trainable(&format!("{prefix}.gamma"), Tensor::full(&[c], T::one()))?;
    ps.add_trainable(&format!("{prefix}.beta"), Tensor::zeros(&[c]))?;
    ps.add_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[c]))?;
    ps.add_buffer(&format!("{prefix}.running_var"), Tensor::full(&[c], T::one()))?;
    Ok(())
}

/// Convolution weights only, `<prefix>.weight`.
pub fn register_conv<T: Scalar>(
    ps: &mut ParameterSet<T>,
    rng: &mut StreamRng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) -> Result<()> {
    let fan_in = c_in * k * k;
    ps.add_trainable(
        &format!("{prefix}.weight"),
        uniform_init(&[c_out, c_in, k, k], fan_in, rng),
    )?;
    Ok(())
}

/// Fully connected weights and bias under `<prefix>.{weight,bias}`.
pub fn register_linear<T: Scalar>(
    ps: &mut ParameterSet<T>,
    rng: &mut StreamRng,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) -> Result<()> {
    ps.add_trainable(
        &format!("{prefix}.weight"),
        uniform_init(&[d_out, d_in], d_in, rng),
    )?;
    ps.add_trainable(&format!("{prefix}.bias"), uniform_init(&[d_out], d_in, rng))?;
    Ok(())
}

pub fn conv<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let w = sess.param(ps, &format!("{prefix}.weight"))?;
    Ok(sess.tape.conv2d(x, w, stride, pad)?)
}

/// Convolution, batch norm, no activation.
pub fn conv_bn<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let y = conv(sess, ps, prefix, x, stride, pad)?;
    Ok(sess.batch_norm(ps, prefix, y)?)
}

/// Convolution, batch norm, relu.
pub fn conv_bn_relu<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let y = conv_bn(sess, ps, prefix, x, stride, pad)?;
    Ok(sess.tape.relu(y)?)
}

pub fn linear<T: Scalar>(
    sess: &mut Session<T>,
    ps: &ParameterSet<T>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = sess.param(ps, &format!("{prefix}.weight"))?;
    let b = sess.param(ps, &format!("{prefix}.bias"))?;
    Ok(sess.tape.linear(x, w, b)?)
}

/// Trainable scalars registered by `register_conv_bn`.
pub fn conv_bn_count(c_in: usize, c_out: usize, k: usize) -> usize {
    c_in * c_out * k * k + 2 * c_out
}

/// Trainable scalars registered by `register_conv`.
pub fn conv_count(c_in: usize, c_out: usize, k: usize) -> usize {
    c_in * c_out * k * k
}

/// Trainable scalars registered by `register_linear`.
pub fn linear_count(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rga_tensor::{Stream, StreamRng};

    #[test]
    fn init_bounds_follow_fan_in() {
        let mut rng = StreamRng::new(1, Stream::Init);
        let t: Tensor<f64> = uniform_init(&[8, 16, 1, 1], 16, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(t.iter().all(|&v| v.abs() <= bound));
        assert!(t.iter().any(|&v| v.abs() > bound * 0.2), "draws look degenerate");
    }

    #[test]
    fn conv_bn_registration_matches_count() {
        let mut rng = StreamRng::new(2, Stream::Init);
        let mut ps = ParameterSet::<f64>::new();
        register_conv_bn(&mut ps, &mut rng, "layer", 3, 8, 3).unwrap();
        assert_eq!(ps.trainable_scalars(), conv_bn_count(3, 8, 3));
        assert!(ps.contains("layer.running_mean"));
        assert!(ps.contains("layer.running_var"));
    }

    #[test]
    fn linear_registration_matches_count() {
        let mut rng = StreamRng::new(3, Stream::Init);
        let mut ps = ParameterSet::<f64>::new();
        register_linear(&mut ps, &mut rng, "fc", 12, 5).unwrap();
        assert_eq!(ps.trainable_scalars(), linear_count(12, 5));
    }
}
