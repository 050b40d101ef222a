use crate::error::{Error, Result};
use crate::volume::{dilate, Volume};

pub const ROI_DILATION: usize = 2;

#[inline]
pub(crate) fn bin_of(v: f32, bins: usize) -> usize {
    let t = ((v as f64 + 1.0) * 0.5 * bins as f64).floor();
    (t.max(0.0) as usize).min(bins - 1)
}

/// Joint histogram of binned intensity pairs.
#[derive(Clone, Debug)]
pub struct JointHistogram {
    bins: usize,
    counts: Vec<u32>,
    total: u64,
}

impl JointHistogram {
    pub fn new(bins: usize) -> Self {
        Self {
            bins,
            counts: vec![0; bins * bins],
            total: 0,
        }
    }

    pub fn clear(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.total = 0;
    }

    #[inline]
    pub fn add(&mut self, a: f32, b: f32) {
        self.counts[bin_of(a, self.bins) * self.bins + bin_of(b, self.bins)] += 1;
        self.total += 1;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    fn marginals(&self) -> (Vec<f64>, Vec<f64>) {
        let mut pa = vec![0.0; self.bins];
        let mut pb = vec![0.0; self.bins];
        let n = self.total as f64;
        for i in 0..self.bins {
            for j in 0..self.bins {
                let p = self.counts[i * self.bins + j] as f64 / n;
                pa[i] += p;
                pb[j] += p;
            }
        }
        (pa, pb)
    }

    /// `sum p(u,v) ln[p(u,v) / (p(u) p(v))]` in nats.
    pub fn mutual_information(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let (pa, pb) = self.marginals();
        let n = self.total as f64;
        let mut mi = 0.0;
        for i in 0..self.bins {
            for j in 0..self.bins {
                let c = self.counts[i * self.bins + j];
                if c > 0 {
                    let p = c as f64 / n;
                    mi += p * (p / (pa[i] * pb[j])).ln();
                }
            }
        }
        mi.max(0.0)
    }

    /// Entropy of the first marginal, in nats.
    pub fn entropy_a(&self) -> f64 {
        let (pa, _) = self.marginals();
        -pa.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

fn dilated_roi(v: &Volume) -> Vec<bool> {
    match &v.roi_mask {
        Some(m) => dilate(m, v.extents, ROI_DILATION),
        None => vec![true; v.len()],
    }
}

/// Mutual information over the intersection of both roi masks, each dilated by two voxels.
pub fn mutual_information(a: &Volume, b: &Volume, bins: usize) -> Result<f64> {
    if a.extents != b.extents {
        return Err(Error::Registration(format!(
            "mutual information needs identical extents, got {:?} and {:?}",
            a.extents, b.extents
        )));
    }
    if bins < 2 {
        return Err(Error::Registration(format!("need at least 2 histogram bins, got {bins}")));
    }
    let (ma, mb) = (dilated_roi(a), dilated_roi(b));
    let mut h = JointHistogram::new(bins);
    for i in 0..a.len() {
        if ma[i] && mb[i] {
            h.add(a.intensities[i], b.intensities[i]);
        }
    }
    if h.total() == 0 {
        return Err(Error::Registration("empty evaluation region for mutual information".into()));
    }
    Ok(h.mutual_information())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binning_covers_the_closed_range() {
        assert_eq!(bin_of(-1.0, 32), 0);
        assert_eq!(bin_of(1.0, 32), 31);
        assert_eq!(bin_of(0.0, 32), 16);
        assert_eq!(bin_of(-0.999, 4), 0);
    }

    #[test]
    fn self_information_is_entropy() {
        let mut v = Volume::filled([16, 16, 16], 1.0, 0.0);
        for (i, x) in v.intensities.iter_mut().enumerate() {
            *x = ((i * 37 % 101) as f32 / 50.0) - 1.0;
        }
        let mut h = JointHistogram::new(32);
        v.intensities.iter().for_each(|&x| h.add(x, x));
        let mi = mutual_information(&v, &v, 32).unwrap();
        assert!((mi - h.entropy_a()).abs() < 1e-12);
    }

    #[test]
    fn empty_region_is_an_error() {
        let mut a = Volume::filled([16, 16, 16], 1.0, 0.0);
        let mut b = a.clone();
        let mut ma = vec![false; a.len()];
        let mut mb = vec![false; a.len()];
        ma[0] = true;
        mb[a.len() - 1] = true;
        a.roi_mask = Some(ma);
        b.roi_mask = Some(mb);
        assert!(mutual_information(&a, &b, 32).is_err());
    }
}
