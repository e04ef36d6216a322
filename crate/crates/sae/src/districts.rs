//! District-level HIV testing counts for females aged 15 to 29 in Malawi,
//! 2015-16, with sampled and frame cluster counts by urban/rural stratum.
//! Likoma is not included.

use crate::error::CliResult;
use crate::io::{fmt, write_csv};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DistrictCounts {
    pub district: &'static str,
    pub positive: u64,
    pub tested: u64,
    pub sampled_urban: u32,
    pub sampled_rural: u32,
    pub frame_urban: u32,
    pub frame_rural: u32,
}

const fn d(district: &'static str, positive: u64, tested: u64, su: u32, sr: u32, fu: u32, fr: u32) -> DistrictCounts {
    DistrictCounts { district, positive, tested, sampled_urban: su, sampled_rural: sr, frame_urban: fu, frame_rural: fr }
}

pub const MALAWI_DISTRICTS: [DistrictCounts; 27] = [
    d("Balaka", 13, 176, 6, 24, 17, 275),
    d("Blantyre", 19, 185, 19, 16, 412, 381),
    d("Chikwawa", 4, 136, 4, 27, 16, 380),
    d("Chiradzulu", 10, 132, 2, 27, 2, 334),
    d("Chitipa", 3, 109, 5, 20, 11, 205),
    d("Dedza", 5, 182, 5, 29, 15, 486),
    d("Dowa", 6, 190, 5, 28, 18, 450),
    d("Karonga", 9, 143, 8, 20, 37, 370),
    d("Kasungu", 7, 180, 7, 26, 29, 486),
    d("Lilongwe", 15, 220, 14, 23, 458, 1173),
    d("Machinga", 15, 171, 5, 27, 19, 436),
    d("Mangochi", 22, 206, 6, 29, 25, 614),
    d("Mchinji", 4, 184, 5, 26, 12, 374),
    d("Mulanje", 23, 165, 4, 29, 17, 658),
    d("Mwanza", 12, 122, 6, 19, 9, 80),
    d("Mzimba", 6, 204, 11, 24, 122, 825),
    d("Neno", 12, 153, 3, 23, 3, 157),
    d("Nkhata Bay", 6, 139, 5, 22, 12, 229),
    d("Nkhotakota", 9, 163, 6, 22, 16, 177),
    d("Nsanje", 9, 124, 6, 21, 14, 241),
    d("Ntcheu", 11, 164, 4, 28, 11, 468),
    d("Ntchisi", 1, 145, 4, 23, 6, 204),
    d("Phalombe", 17, 165, 3, 27, 3, 316),
    d("Rumphi", 8, 130, 6, 20, 12, 156),
    d("Salima", 5, 168, 6, 23, 22, 416),
    d("Thyolo", 8, 177, 4, 30, 12, 674),
    d("Zomba", 19, 194, 9, 26, 79, 584),
];

/// Writes the counts in the `area_id,y_positive,n_tested` schema read by
/// `sae direct`.
pub fn write_counts(path: &Path) -> CliResult<()> {
    write_csv(
        path,
        &["area_id", "y_positive", "n_tested"],
        MALAWI_DISTRICTS.iter().map(|r| vec![r.district.to_owned(), r.positive.to_string(), r.tested.to_string()]),
    )
}

/// Urban share of frame clusters per district.
pub fn write_frame_urban_fractions(path: &Path) -> CliResult<()> {
    write_csv(
        path,
        &["area_id", "q"],
        MALAWI_DISTRICTS
            .iter()
            .map(|r| vec![r.district.to_owned(), fmt(r.frame_urban as f64 / (r.frame_urban + r.frame_rural) as f64)]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_totals() {
        let sum = |f: fn(&DistrictCounts) -> u64| MALAWI_DISTRICTS.iter().map(f).sum::<u64>();
        assert_eq!(sum(|r| r.positive), 278);
        assert_eq!(sum(|r| r.tested), 4427);
        assert_eq!(sum(|r| r.sampled_urban as u64), 168);
        assert_eq!(sum(|r| r.sampled_rural as u64), 659);
        assert_eq!(sum(|r| r.frame_urban as u64), 1409);
        assert_eq!(sum(|r| r.frame_rural as u64), 11149);
    }
}
