//! Exploration assist: follow-up prompt suggestions and image augmentations
//! that keep a failure exploration going.
//!
//! Three suggestion strategies are derived from a classified image:
//! * Guide: an out-of-distribution expectation is steered to broader or
//!   narrower labels the model can detect.
//! * Challenge: a correct detection is stressed with harder variants.
//! * Repeat: a false detection on an in-distribution label asks for a similar
//!   object, described by an image-to-text model from the annotated crop.

pub mod augment;
pub mod external;
pub mod lexicon;

use std::collections::BTreeSet;

use image::{imageops, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{AnnotatedObject, ClassSet, DistributionTag, FailureMode, FailureReport};
use crate::geometry::normalize_label;

pub use augment::{augment, augment_bytes, AugmentError, AugmentationKind, AugmentationSpec};
pub use external::{CaptionBackend, ExternalError, FixtureCaptioner, FixtureImageGenerator, HttpCaptioner, ImageGenerator};
pub use lexicon::Lexicon;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("label is empty after normalization")]
    EmptyLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Guide,
    Challenge,
    Repeat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSuggestion {
    pub strategy: Strategy,
    pub text: String,
    pub rationale: String,
    pub source_annotation_id: String,
}

/// Suggestions plus notices about strategies that could not run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Suggestions {
    pub suggestions: Vec<PromptSuggestion>,
    pub notices: Vec<String>,
}

/// What the Repeat strategy needs: the explored image and a captioner.
pub struct RepeatSource<'a> {
    pub captioner: &'a dyn CaptionBackend,
    pub image: &'a RgbaImage,
}

/// The fixed Challenge templates for a detected label, in order.
pub fn challenge_templates(label: &str) -> Result<Vec<String>, PromptError> {
    let label = normalize_label(label);
    if label.is_empty() {
        return Err(PromptError::EmptyLabel);
    }
    Ok(vec![
        format!("an image of a {label} at night"),
        format!("many {label}s"),
        format!("a partially occluded {label}"),
        format!("a blurry photo of a {label}"),
        format!("a drawing of a {label}"),
    ])
}

/// Builds Guide, Challenge and Repeat suggestions for one classified image.
///
/// Output order is all Guide suggestions, then Challenge, then Repeat; within
/// a strategy suggestions are ordered by source annotation id.
pub fn suggest_prompts(
    report: &FailureReport,
    anns: &[AnnotatedObject],
    lexicon: &Lexicon,
    model_classes: &ClassSet,
    repeat: Option<RepeatSource<'_>>,
) -> Suggestions {
    let find = |id: &str| anns.iter().find(|a| a.id == id);
    let mut guide = Vec::new();
    let mut challenge = Vec::new();
    let mut repeat_out = Vec::new();
    let mut notices = Vec::new();

    let mut with_ann: Vec<(&AnnotatedObject, FailureMode, Option<DistributionTag>)> = report
        .instances
        .iter()
        .filter_map(|inst| {
            let ann = find(inst.annotation_id.as_deref()?)?;
            Some((ann, inst.mode, inst.distribution))
        })
        .collect();
    with_ann.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    for (ann, mode, distribution) in with_ann {
        let label = ann.labeled.label.as_str();
        if distribution == Some(DistributionTag::OOD) {
            let mut seen = BTreeSet::new();
            let related = lexicon
                .hypernyms(label)
                .iter()
                .map(|l| (l, "broader"))
                .chain(lexicon.hyponyms(label).iter().map(|l| (l, "narrower")));
            for (target, relation) in related {
                if !model_classes.contains(target) || !seen.insert(target.clone()) {
                    continue;
                }
                guide.push(PromptSuggestion {
                    strategy: Strategy::Guide,
                    text: format!("an image of a {target}"),
                    rationale: format!("'{label}' is outside the model's classes; '{target}' is a {relation} label it can detect"),
                    source_annotation_id: ann.id.clone(),
                });
            }
        }
        match mode {
            FailureMode::CD => {
                for text in challenge_templates(label).expect("labels are non-empty") {
                    challenge.push(PromptSuggestion {
                        strategy: Strategy::Challenge,
                        text,
                        rationale: format!("'{label}' was detected correctly; try a harder variant"),
                        source_annotation_id: ann.id.clone(),
                    });
                }
            }
            FailureMode::FD if distribution == Some(DistributionTag::ID) => match &repeat {
                None => notices.push(format!(
                    "repeat suggestion for annotation {} skipped: no caption backend configured",
                    ann.id
                )),
                Some(src) => match caption_crop(src, ann) {
                    Ok(text) => repeat_out.push(PromptSuggestion {
                        strategy: Strategy::Repeat,
                        text,
                        rationale: format!("'{label}' is a known class but was misdetected; look for a similar object"),
                        source_annotation_id: ann.id.clone(),
                    }),
                    Err(e) => notices.push(format!("repeat suggestion for annotation {} skipped: {e}", ann.id)),
                },
            },
            _ => {}
        }
    }

    let mut suggestions = guide;
    suggestions.extend(challenge);
    suggestions.extend(repeat_out);
    Suggestions { suggestions, notices }
}

fn caption_crop(src: &RepeatSource<'_>, ann: &AnnotatedObject) -> Result<String, ExternalError> {
    let (w, h) = src.image.dimensions();
    let [x0, y0, x1, y1] = ann.labeled.bbox.to_pixels(w, h);
    let x = (x0.floor() as u32).min(w.saturating_sub(1));
    let y = (y0.floor() as u32).min(h.saturating_sub(1));
    let cw = ((x1.ceil() as u32).min(w) - x).max(1);
    let ch = ((y1.ceil() as u32).min(h) - y).max(1);
    let crop = imageops::crop_imm(src.image, x, y, cw, ch).to_image();
    let png = augment::encode_png(&crop).map_err(|e| ExternalError::Malformed(e.to_string()))?;
    src.captioner.caption(&png)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::optimal_assignment;
    use crate::catalog::coco80;
    use crate::classify::{classify, ClassifyContext, PredictedObject, Score, Thresholds};
    use crate::geometry::{build_cost_matrix, BoundingBox, Label, LabeledBox, MatchWeights};

    fn ann(id: &str, label: &str, b: [f64; 4]) -> AnnotatedObject {
        AnnotatedObject {
            id: id.into(),
            image_id: "img".into(),
            labeled: LabeledBox::new(Label::new(label).unwrap(), BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap()),
        }
    }

    fn pred(id: &str, label: &str, b: [f64; 4]) -> PredictedObject {
        PredictedObject {
            id: id.into(),
            labeled: LabeledBox::new(Label::new(label).unwrap(), BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap()),
            score: Score::new(0.99).unwrap(),
        }
    }

    fn report(anns: &[AnnotatedObject], preds: &[PredictedObject]) -> FailureReport {
        let a: Vec<_> = anns.iter().map(|x| x.labeled.clone()).collect();
        let p: Vec<_> = preds.iter().map(|x| x.labeled.clone()).collect();
        let asg = optimal_assignment(&build_cost_matrix(&a, &p, &MatchWeights::default()));
        let ctx = ClassifyContext {
            image_id: "img".into(),
            model_id: "m".into(),
            persona_id: "p".into(),
            scenario_id: "s".into(),
        };
        classify(anns, preds, &asg, Some(&coco80()), &Thresholds::default(), &ctx).unwrap()
    }

    #[test]
    fn templates() {
        let t = challenge_templates("cat").unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(t[0], "an image of a cat at night");
        assert_eq!(t[1], "many cats");
        assert!(challenge_templates("taxi").unwrap().iter().all(|p| p.contains("taxi")));
        assert_eq!(challenge_templates("  "), Err(PromptError::EmptyLabel));
    }

    #[test]
    fn guide_for_ood_taxi() {
        let anns = [ann("a0", "taxi", [0.1, 0.1, 0.5, 0.5])];
        let preds = [pred("p0", "car", [0.1, 0.1, 0.5, 0.5])];
        let r = report(&anns, &preds);
        let s = suggest_prompts(&r, &anns, &Lexicon::bundled(), &coco80(), None);
        let guides: Vec<_> = s.suggestions.iter().filter(|x| x.strategy == Strategy::Guide).collect();
        assert_eq!(guides.len(), 1);
        assert!(guides[0].text.contains("car"));
        // taxi is OOD, so no Repeat and no notice
        assert!(s.notices.is_empty());
    }

    #[test]
    fn challenge_for_cd() {
        let anns = [ann("a0", "cat", [0.1, 0.1, 0.5, 0.5])];
        let preds = [pred("p0", "cat", [0.1, 0.1, 0.5, 0.5])];
        let s = suggest_prompts(&report(&anns, &preds), &anns, &Lexicon::bundled(), &coco80(), None);
        let texts: Vec<_> = s.suggestions.iter().map(|x| x.text.as_str()).collect();
        assert_eq!(texts, challenge_templates("cat").unwrap());
    }

    #[test]
    fn repeat_needs_backend() {
        let anns = [ann("a0", "dog", [0.1, 0.1, 0.5, 0.5])];
        let preds = [pred("p0", "cat", [0.1, 0.1, 0.5, 0.5])];
        let r = report(&anns, &preds);
        let s = suggest_prompts(&r, &anns, &Lexicon::bundled(), &coco80(), None);
        assert!(s.suggestions.iter().all(|x| x.strategy != Strategy::Repeat));
        assert_eq!(s.notices.len(), 1);

        let img = RgbaImage::new(40, 20);
        let captioner = FixtureCaptioner::with_fallback("a brown dog sitting");
        let s = suggest_prompts(
            &r,
            &anns,
            &Lexicon::bundled(),
            &coco80(),
            Some(RepeatSource {
                captioner: &captioner,
                image: &img,
            }),
        );
        assert_eq!(s.suggestions.len(), 1);
        assert_eq!(s.suggestions[0].strategy, Strategy::Repeat);
        assert_eq!(s.suggestions[0].text, "a brown dog sitting");
    }

    #[test]
    fn ordering_guide_challenge_repeat() {
        let anns = [
            ann("b", "cat", [0.6, 0.6, 0.9, 0.9]),
            ann("a", "taxi", [0.1, 0.1, 0.4, 0.4]),
            ann("c", "dog", [0.1, 0.6, 0.3, 0.9]),
        ];
        let preds = [
            pred("p0", "cat", [0.6, 0.6, 0.9, 0.9]),
            pred("p1", "car", [0.1, 0.1, 0.4, 0.4]),
            pred("p2", "horse", [0.1, 0.6, 0.3, 0.9]),
        ];
        let img = RgbaImage::new(10, 10);
        let captioner = FixtureCaptioner::with_fallback("x");
        let s = suggest_prompts(
            &report(&anns, &preds),
            &anns,
            &Lexicon::bundled(),
            &coco80(),
            Some(RepeatSource {
                captioner: &captioner,
                image: &img,
            }),
        );
        let strategies: Vec<_> = s.suggestions.iter().map(|x| x.strategy).collect();
        let mut sorted = strategies.clone();
        sorted.sort();
        assert_eq!(strategies, sorted);
        assert_eq!(s.suggestions.first().unwrap().source_annotation_id, "a");
        assert_eq!(s.suggestions.last().unwrap().source_annotation_id, "c");
    }
}
