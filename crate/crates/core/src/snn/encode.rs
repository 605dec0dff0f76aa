use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::DenseTensor;

/// Direct coding: the analog image is presented unchanged at every timestep; spikes first
/// appear after the LIF that follows the (undecomposed) first conv layer.
pub fn direct_encode<T: Real>(image: &DenseTensor<T>, t_steps: usize) -> Result<Vec<DenseTensor<T>>> {
    if t_steps == 0 {
        return Err(Error::Input("direct coding needs at least one timestep".into()));
    }
    Ok(vec![image.clone(); t_steps])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replicates_analog_value() {
        let img = DenseTensor::full(&[1, 2, 2], 0.5f32);
        let frames = direct_encode(&img, 4).unwrap();
        assert_eq!(frames.len(), 4);
        assert!(frames.iter().all(|f| f == &img));
        assert_eq!(direct_encode(&img, 1).unwrap(), vec![img.clone()]);
        assert!(direct_encode(&img, 0).is_err());
    }
}
