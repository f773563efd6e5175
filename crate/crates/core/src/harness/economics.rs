/// Time-bounded buffers: an attack triggering d detections needs d full
/// buffer windows of t hours.
pub fn economics_time_bounded(detections: f64, buffer_hours: f64) -> f64 {
    assert!(detections >= 0.0 && buffer_hours >= 0.0);
    detections * buffer_hours
}

/// Query-bounded buffers: flushing an N-entry buffer d times at a
/// per-1000-query price.
pub fn economics_query_bounded(detections: f64, buffer_queries: f64, price_per_1000: f64) -> f64 {
    assert!(detections >= 0.0 && buffer_queries >= 0.0 && price_per_1000 >= 0.0);
    detections * buffer_queries * price_per_1000 / 1000.0
}
