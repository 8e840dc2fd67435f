use super::tensor::FeatureMap;

/// Replaces every cell of each channel by that channel's spatial mean.
pub fn global_average_pool_unpool(input: &FeatureMap) -> FeatureMap {
    let (c, h, w) = input.shape();
    let n = (h * w) as f64;
    let mut out = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        let mean = if h * w == 0 {
            0.0
        } else {
            input.plane(ch).iter().sum::<f64>() / n
        };
        out.plane_mut(ch).iter_mut().for_each(|v| *v = mean);
    }
    out
}

/// The operator is linear and self-adjoint: the backward pass is the same
/// averaging applied to the output gradient.
pub fn global_average_pool_unpool_backward(grad_out: &FeatureMap) -> FeatureMap {
    global_average_pool_unpool(grad_out)
}
