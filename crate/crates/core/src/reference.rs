//! Published full-scale results, kept apart from computed numbers.

/// Datasets the published numbers refer to.
pub const DATASETS: [&str; 3] = ["fashion-mnist", "cifar10", "coco2"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceValue {
    /// `accuracy`, `AR` or `AP`.
    pub metric: &'static str,
    pub method: &'static str,
    pub dataset: &'static str,
    pub value: f64,
    pub citation: &'static str,
}

const ACC: &str = "published clean-test accuracy comparison";
const SUMMARY: &str = "published AR/AP summary at threshold 40";

const fn acc(method: &'static str, dataset: &'static str, value: f64) -> ReferenceValue {
    ReferenceValue {
        metric: "accuracy",
        method,
        dataset,
        value,
        citation: ACC,
    }
}

const fn sum(metric: &'static str, method: &'static str, dataset: &'static str, value: f64) -> ReferenceValue {
    ReferenceValue {
        metric,
        method,
        dataset,
        value,
        citation: SUMMARY,
    }
}

pub const ACCURACY: [ReferenceValue; 14] = [
    acc("unrefined", "fashion-mnist", 0.862),
    acc("unrefined", "cifar10", 0.789),
    acc("unrefined", "coco2", 0.845),
    acc("xbl_d", "fashion-mnist", 0.904),
    acc("xbl_d", "cifar10", 0.843),
    acc("xbl_d", "coco2", 0.938),
    acc("rrr", "fashion-mnist", 0.894),
    acc("rrr", "cifar10", 0.810),
    acc("rrr", "coco2", 0.853),
    acc("rrr_g", "fashion-mnist", 0.786),
    acc("rbr", "fashion-mnist", 0.876),
    acc("cdep", "fashion-mnist", 0.767),
    acc("hint", "fashion-mnist", 0.582),
    acc("ce", "fashion-mnist", 0.858),
];

pub const SUMMARY_AR_AP: [ReferenceValue; 18] = [
    sum("AR", "unrefined", "fashion-mnist", 0.280),
    sum("AR", "unrefined", "cifar10", 0.419),
    sum("AR", "unrefined", "coco2", 0.500),
    sum("AR", "xbl_d", "fashion-mnist", 0.557),
    sum("AR", "xbl_d", "cifar10", 0.516),
    sum("AR", "xbl_d", "coco2", 0.860),
    sum("AR", "rrr", "fashion-mnist", 0.335),
    sum("AR", "rrr", "cifar10", 0.432),
    sum("AR", "rrr", "coco2", 0.841),
    sum("AP", "unrefined", "fashion-mnist", 0.318),
    sum("AP", "unrefined", "cifar10", 0.168),
    sum("AP", "unrefined", "coco2", 0.609),
    sum("AP", "xbl_d", "fashion-mnist", 0.663),
    sum("AP", "xbl_d", "cifar10", 0.342),
    sum("AP", "xbl_d", "coco2", 0.698),
    sum("AP", "rrr", "fashion-mnist", 0.425),
    sum("AP", "rrr", "cifar10", 0.181),
    sum("AP", "rrr", "coco2", 0.761),
];

pub fn accuracy(method: &str, dataset: &str) -> Option<f64> {
    ACCURACY.iter().find(|r| r.method == method && r.dataset == dataset).map(|r| r.value)
}

pub fn summary(metric: &str, method: &str, dataset: &str) -> Option<f64> {
    SUMMARY_AR_AP
        .iter()
        .find(|r| r.metric == metric && r.method == method && r.dataset == dataset)
        .map(|r| r.value)
}

/// Maps a dataset name (`decoy-fashion-mnist`, `cifar10`, a COCO folder, …)
/// to the key the published numbers use.
pub fn dataset_key(name: &str) -> Option<&'static str> {
    let n = name.to_ascii_lowercase();
    if n.contains("fashion") || n.contains("fmnist") {
        Some("fashion-mnist")
    } else if n.contains("cifar") {
        Some("cifar10")
    } else if n.contains("coco") {
        Some("coco2")
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookups() {
        assert_eq!(accuracy("xbl_d", "fashion-mnist"), Some(0.904));
        assert_eq!(accuracy("rrr_g", "cifar10"), None);
        assert_eq!(summary("AR", "rrr", "fashion-mnist"), Some(0.335));
        assert_eq!(dataset_key("decoy-fashion-mnist"), Some("fashion-mnist"));
        assert_eq!(dataset_key("decoy-toy"), None);
    }
}
