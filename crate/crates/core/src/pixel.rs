//! Linear dB ↔ 8-bit intensity mapping: pixel `v` stores `v` dB.

pub fn db_to_pixel(pathloss_db: f64) -> u8 {
    if pathloss_db.is_nan() {
        return 0;
    }
    libm::round(pathloss_db.clamp(0.0, 255.0)) as u8
}

pub fn pixel_to_db(v: u8) -> f64 {
    f64::from(v)
}
