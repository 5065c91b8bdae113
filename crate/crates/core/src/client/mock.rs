//! Deterministic offline backends.
//!
//! Echo answers with the ground-truth box verbatim, closing the pipeline
//! loop at iou = giou = 1. Perturb shifts the ground truth by a known
//! offset (plus optional jitter and injected parse failures), producing
//! analytically checkable scores. Neither models real VLM error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendKind, ClientError, QueryRequest, QueryResponse};
use crate::metrics::BBox;
use crate::parse::format_bbox;

#[derive(Debug, Clone, Copy, Default)]
pub struct EchoBackend;

impl Backend for EchoBackend {
    fn identity(&self) -> String {
        "mock-echo-v1".to_owned()
    }

    fn kind(&self) -> BackendKind {
        BackendKind::MockEcho
    }

    fn query(&self, request: &QueryRequest) -> Result<QueryResponse, ClientError> {
        let gt = request.gt_hint.ok_or(ClientError::MissingGroundTruth)?;
        let text = format!(
            "The target is clearly visible and I can read its extent directly \
             off the image. Final coordinates: {}",
            format_bbox(&gt)
        );
        Ok(QueryResponse {
            text,
            latency_ms: 0,
            from_cache: false,
        })
    }
}

/// Per-corner displacement applied to the ground-truth corners
/// (x1, y1, x2, y2), either in pixels or as fractions of the box's own
/// width (x components) and height (y components).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Offset {
    Pixels([f64; 4]),
    Fraction([f64; 4]),
}

impl Offset {
    fn apply(&self, gt: &BBox) -> [f64; 4] {
        let [x1, y1, x2, y2] = gt.corners();
        match *self {
            Offset::Pixels([a, b, c, d]) => [x1 + a, y1 + b, x2 + c, y2 + d],
            Offset::Fraction([a, b, c, d]) => [
                x1 + a * gt.width(),
                y1 + b * gt.height(),
                x2 + c * gt.width(),
                y2 + d * gt.height(),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbBackend {
    pub offset: Offset,
    /// Additional uniform jitter in [-jitter, jitter] pixels per corner.
    pub jitter: f64,
    /// Probability that a query returns prose with no coordinate tuple.
    pub failure_probability: f64,
    pub seed: u64,
}

impl PerturbBackend {
    /// Pure fixed-offset perturbation: no jitter, no injected failures.
    pub fn fixed_pixels(offset: [f64; 4]) -> Self {
        Self {
            offset: Offset::Pixels(offset),
            jitter: 0.0,
            failure_probability: 0.0,
            seed: 0,
        }
    }

    /// Stable per-request stream: any change to seed, image, prompt, or
    /// ground truth moves every draw; identical requests replay identically.
    fn request_rng(&self, request: &QueryRequest, gt: &BBox) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(b"mock-perturb-stream-v1");
        h.update(self.seed.to_le_bytes());
        h.update(request.image.width().to_le_bytes());
        h.update(request.image.height().to_le_bytes());
        h.update(request.image.data());
        h.update(request.prompt.as_bytes());
        for v in gt.corners() {
            h.update(v.to_le_bytes());
        }
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

impl Backend for PerturbBackend {
    fn identity(&self) -> String {
        let (kind, o) = match self.offset {
            Offset::Pixels(o) => ("px", o),
            Offset::Fraction(o) => ("frac", o),
        };
        format!(
            "mock-perturb-v1({kind}:{},{},{},{};jitter={};pfail={};seed={})",
            o[0], o[1], o[2], o[3], self.jitter, self.failure_probability, self.seed
        )
    }

    fn kind(&self) -> BackendKind {
        BackendKind::MockPerturb
    }

    fn query(&self, request: &QueryRequest) -> Result<QueryResponse, ClientError> {
        let gt = request.gt_hint.ok_or(ClientError::MissingGroundTruth)?;
        let mut rng = self.request_rng(request, &gt);

        let fail_draw: f64 = rng.gen();
        if fail_draw < self.failure_probability {
            return Ok(QueryResponse {
                text: "After scanning the full image I cannot determine where the \
                       object is with any confidence."
                    .to_owned(),
                latency_ms: 0,
                from_cache: false,
            });
        }

        let mut corners = self.offset.apply(&gt);
        if self.jitter > 0.0 {
            for v in &mut corners {
                *v += rng.gen_range(-self.jitter..=self.jitter);
            }
        }
        let text = format!(
            "The object sits slightly off from my first impression, so I adjust \
             the estimate. Final coordinates: [{}, {}, {}, {}]",
            corners[0], corners[1], corners[2], corners[3]
        );
        Ok(QueryResponse {
            text,
            latency_ms: 0,
            from_cache: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::iou;
    use crate::parse::{parse_prediction, ParseFailure, ParserOptions};
    use crate::raster::ImageBuffer;

    fn request(image: &ImageBuffer, gt: BBox) -> QueryRequest<'_> {
        QueryRequest {
            image,
            prompt: "where is it? answer as [x1, y1, x2, y2]",
            gt_hint: Some(gt),
        }
    }

    fn parse(text: &str, dims: (u32, u32)) -> Result<BBox, ParseFailure> {
        parse_prediction(text, dims, ParserOptions::default()).map(|p| p.bbox)
    }

    #[test]
    fn echo_closes_on_ground_truth() {
        let image = ImageBuffer::filled(320, 240, [10, 20, 30]).unwrap();
        let gt = BBox::new(50.0, 40.0, 150.0, 200.0).unwrap();
        let resp = EchoBackend.query(&request(&image, gt)).unwrap();
        let parsed = parse(&resp.text, (320, 240)).unwrap();
        assert_eq!(parsed, gt);
        assert_eq!(iou(&parsed, &gt), 1.0);
    }

    #[test]
    fn missing_ground_truth_is_fatal() {
        let image = ImageBuffer::filled(8, 8, [0, 0, 0]).unwrap();
        let req = QueryRequest {
            image: &image,
            prompt: "p",
            gt_hint: None,
        };
        let err = EchoBackend.query(&req).unwrap_err();
        assert!(matches!(err, ClientError::MissingGroundTruth));
        assert!(err.is_fatal());
        assert!(matches!(
            PerturbBackend::fixed_pixels([0.0; 4]).query(&req),
            Err(ClientError::MissingGroundTruth)
        ));
    }

    #[test]
    fn fixed_offset_worked_example() {
        let image = ImageBuffer::filled(400, 400, [128, 128, 128]).unwrap();
        let gt = BBox::new(50.0, 50.0, 150.0, 150.0).unwrap();
        let backend = PerturbBackend::fixed_pixels([10.0, 10.0, 10.0, 10.0]);
        let resp = backend.query(&request(&image, gt)).unwrap();
        assert!(resp.text.contains("[60, 60, 160, 160]"));

        let parsed = parse(&resp.text, (400, 400)).unwrap();
        assert!((iou(&parsed, &gt) - 8100.0 / 11900.0).abs() < 1e-9);
    }

    #[test]
    fn fraction_offset_scales_by_box_extent() {
        let image = ImageBuffer::filled(400, 400, [0, 0, 0]).unwrap();
        let gt = BBox::new(100.0, 100.0, 200.0, 300.0).unwrap();
        let backend = PerturbBackend {
            offset: Offset::Fraction([0.1, 0.1, 0.0, 0.0]),
            jitter: 0.0,
            failure_probability: 0.0,
            seed: 0,
        };
        let resp = backend.query(&request(&image, gt)).unwrap();
        // x shift 0.1·100, y shift 0.1·200
        assert!(resp.text.contains("[110, 120, 200, 300]"));
    }

    #[test]
    fn deterministic_per_request() {
        let image = ImageBuffer::filled(64, 64, [1, 2, 3]).unwrap();
        let gt = BBox::new(5.0, 5.0, 20.0, 20.0).unwrap();
        let backend = PerturbBackend {
            offset: Offset::Pixels([1.0, 2.0, 3.0, 4.0]),
            jitter: 2.5,
            failure_probability: 0.5,
            seed: 99,
        };
        let a = backend.query(&request(&image, gt)).unwrap();
        let b = backend.query(&request(&image, gt)).unwrap();
        assert_eq!(a, b);

        // jitter draws are keyed to the image, so a different image moves
        // the corners (failure injection off to keep both responses boxes)
        let jittered = PerturbBackend {
            failure_probability: 0.0,
            ..backend
        };
        let other = ImageBuffer::filled(64, 64, [1, 2, 4]).unwrap();
        let c = jittered.query(&request(&image, gt)).unwrap();
        let d = jittered.query(&request(&other, gt)).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn failure_injection_extremes() {
        let image = ImageBuffer::filled(64, 64, [0, 0, 0]).unwrap();
        let gt = BBox::new(5.0, 5.0, 20.0, 20.0).unwrap();
        let mut never = PerturbBackend::fixed_pixels([0.0; 4]);
        never.failure_probability = 0.0;
        let mut always = PerturbBackend::fixed_pixels([0.0; 4]);
        always.failure_probability = 1.0 + 1e-9;

        for seed in 0..20 {
            never.seed = seed;
            always.seed = seed;
            let ok = never.query(&request(&image, gt)).unwrap();
            assert!(parse(&ok.text, (64, 64)).is_ok());
            let fail = always.query(&request(&image, gt)).unwrap();
            assert_eq!(parse(&fail.text, (64, 64)), Err(ParseFailure::NoTupleFound));
        }
    }

    #[test]
    fn identity_distinguishes_parameterizations() {
        let a = PerturbBackend::fixed_pixels([1.0, 0.0, 0.0, 0.0]);
        let mut b = a;
        b.seed = 1;
        let mut c = a;
        c.offset = Offset::Fraction([1.0, 0.0, 0.0, 0.0]);
        assert_ne!(a.identity(), b.identity());
        assert_ne!(a.identity(), c.identity());
        assert_ne!(a.identity(), EchoBackend.identity());
    }
}
