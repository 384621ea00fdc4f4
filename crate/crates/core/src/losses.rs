//! The three training losses.
//!
//! - `seg_loss`: pixel-mean cross-entropy of logits against the label mask.
//! - `ar_loss`: squared L2 distance between reconstruction and input.
//! - `csc_loss`: squared L2 distance between the softmax probability map of
//!   a style-distorted forward pass and the one-hot ground truth.
//!
//! All three are differentiable scalars on the tensor graph. Which
//! parameter subset each loss updates is the site's concern, not theirs.

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::tensor::Tensor;

fn check_logits(logits: &Tensor, mask: &Mask) -> Result<usize> {
    let s = logits.shape();
    if s.len() != 3 || s[1] != mask.h || s[2] != mask.w {
        return Err(Error::Shape(format!(
            "logits {:?} vs mask {}x{}",
            s, mask.h, mask.w
        )));
    }
    let k = s[0];
    if let Some(&bad) = mask.labels.iter().find(|&&l| (l as usize) >= k) {
        return Err(Error::LabelRange {
            found: bad,
            classes: k,
        });
    }
    Ok(k)
}

/// Mean over pixels of `-log softmax(logits)[true class]`.
pub fn seg_loss(logits: &Tensor, mask: &Mask) -> Result<Tensor> {
    check_logits(logits, mask)?;
    let lsm = logits.log_softmax(0)?;
    let one_hot = mask.one_hot();
    let picked = lsm.mul(&one_hot)?.sum_all();
    Ok(picked.scale(-1.0 / (mask.h * mask.w) as f32))
}

/// Squared L2 norm of `recon - image` (sum over all elements).
pub fn ar_loss(recon: &Tensor, image: &Tensor) -> Result<Tensor> {
    if recon.shape() != image.shape() {
        return Err(Error::Shape(format!(
            "recon {:?} vs image {:?}",
            recon.shape(),
            image.shape()
        )));
    }
    Ok(recon.sub(image)?.sq_l2_norm())
}

/// Squared L2 norm between the class probability map and one-hot labels,
/// evaluated on logits from the style-distorted forward pass.
pub fn csc_loss(logits_distorted: &Tensor, mask: &Mask) -> Result<Tensor> {
    check_logits(logits_distorted, mask)?;
    let probs = logits_distorted.softmax(0)?;
    Ok(probs.sub(&mask.one_hot())?.sq_l2_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn mask(classes: usize, h: usize, w: usize, labels: &[u8]) -> Mask {
        Mask::new(classes, h, w, labels.to_vec()).unwrap()
    }

    #[test]
    fn seg_loss_uniform_logits_is_ln_k() {
        for k in [2usize, 4, 7] {
            let logits = Tensor::zeros(vec![k, 2, 2], false);
            let m = mask(k, 2, 2, &[0, 1, 0, 1]);
            let l = seg_loss(&logits, &m).unwrap().item();
            assert!(
                (l - (k as f32).ln()).abs() < 1e-6,
                "K={k}: loss {l} vs ln K {}",
                (k as f32).ln()
            );
        }
    }

    #[test]
    fn seg_loss_large_margin_goes_to_zero() {
        let mut data = vec![0.0f32; 4];
        data[2] = 50.0; // class 2 of 4, single pixel
        let logits = Tensor::from_vec(vec![4, 1, 1], data, false).unwrap();
        let m = mask(4, 1, 1, &[2]);
        assert!(seg_loss(&logits, &m).unwrap().item() < 1e-6);
    }

    #[test]
    fn seg_loss_rejects_label_out_of_range() {
        let logits = Tensor::zeros(vec![2, 1, 1], false);
        let m = mask(4, 1, 1, &[3]); // valid mask, but only 2 logit classes
        assert!(matches!(
            seg_loss(&logits, &m).unwrap_err(),
            Error::LabelRange { found: 3, classes: 2 }
        ));
    }

    #[test]
    fn ar_loss_zero_and_counting() {
        let img = Tensor::from_vec(vec![3, 2, 2], vec![0.25; 12], false).unwrap();
        assert_eq!(ar_loss(&img, &img).unwrap().item(), 0.0);
        let recon = Tensor::from_vec(vec![3, 2, 2], vec![1.25; 12], true).unwrap();
        let l = ar_loss(&recon, &img).unwrap();
        assert_eq!(l.item(), 12.0);
        backward(&l).unwrap();
        // Gradient is exactly 2 (recon - image).
        assert_eq!(recon.grad().unwrap(), vec![2.0; 12]);
    }

    #[test]
    fn csc_loss_exact_prediction_is_zero() {
        // Strong logits on the true class approximate a one-hot probability.
        let mut data = vec![-60.0f32; 4];
        data[1] = 60.0;
        let logits = Tensor::from_vec(vec![4, 1, 1], data, false).unwrap();
        let m = mask(4, 1, 1, &[1]);
        assert!(csc_loss(&logits, &m).unwrap().item() < 1e-9);
    }

    #[test]
    fn csc_loss_uniform_single_pixel() {
        // Uniform probabilities vs one-hot, K=4: (3/4)^2 + 3*(1/4)^2 = 0.75.
        let logits = Tensor::zeros(vec![4, 1, 1], false);
        let m = mask(4, 1, 1, &[0]);
        let l = csc_loss(&logits, &m).unwrap().item();
        assert!((l - 0.75).abs() < 1e-6);
    }
}
