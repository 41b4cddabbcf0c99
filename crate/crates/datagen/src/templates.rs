//! The ten question templates used to elicit instruction-following data from
//! the teacher model. Each template carries a category tag and a question
//! whose header sentence names the material under inspection.

use serde::{Deserialize, Serialize};

/// Category tags for the ten question templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateCategory {
    Basics,
    MorphologyStructure,
    SizeDistribution,
    Surface,
    Composition,
    InteractionsBoundaries,
    ExternalEnvironment,
    Technique,
    Functional,
    ContextApplication,
}

impl TemplateCategory {
    /// All ten categories in canonical order.
    pub const ALL: [TemplateCategory; 10] = [
        TemplateCategory::Basics,
        TemplateCategory::MorphologyStructure,
        TemplateCategory::SizeDistribution,
        TemplateCategory::Surface,
        TemplateCategory::Composition,
        TemplateCategory::InteractionsBoundaries,
        TemplateCategory::ExternalEnvironment,
        TemplateCategory::Technique,
        TemplateCategory::Functional,
        TemplateCategory::ContextApplication,
    ];

    /// Stable snake_case tag used in record ids and JSONL fields.
    pub fn tag(self) -> &'static str {
        match self {
            TemplateCategory::Basics => "basics",
            TemplateCategory::MorphologyStructure => "morphology_structure",
            TemplateCategory::SizeDistribution => "size_distribution",
            TemplateCategory::Surface => "surface",
            TemplateCategory::Composition => "composition",
            TemplateCategory::InteractionsBoundaries => "interactions_boundaries",
            TemplateCategory::ExternalEnvironment => "external_environment",
            TemplateCategory::Technique => "technique",
            TemplateCategory::Functional => "functional",
            TemplateCategory::ContextApplication => "context_application",
        }
    }
}

/// A rendered question for one category, with the material hint substituted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub category: TemplateCategory,
    pub question: String,
}

const BODIES: [(TemplateCategory, &str); 10] = [
    (
        TemplateCategory::Basics,
        "What type of nanomaterial is depicted in the image? What is the scale of the image \
         (e.g., what does one unit of measurement represent)?",
    ),
    (
        TemplateCategory::MorphologyStructure,
        "What is the general shape or morphology of the nanomaterials in the image? Are there \
         distinct layers, phases, or domains visible? Do the nanomaterials appear uniform in \
         size and shape or are they varied?",
    ),
    (
        TemplateCategory::SizeDistribution,
        "What is the approximate size or size range of the individual nanostructures? How are \
         the nanomaterials distributed throughout the image (e.g., evenly spaced, clustered, \
         random)? Is there any evidence of aggregation or bundling?",
    ),
    (
        TemplateCategory::Surface,
        "Does the nanomaterial appear smooth, rough, or have any specific textures? Are there \
         any visible defects, pores, or impurities on the surface?",
    ),
    (
        TemplateCategory::Composition,
        "Is there evidence of compositional variations in the image (e.g., different colors, \
         brightness, or contrasts)? Are there any labels or markers indicating specific \
         elements or compounds present?",
    ),
    (
        TemplateCategory::InteractionsBoundaries,
        "How do individual nanostructures interact with one another (e.g., are they touching, \
         fused, or separate)? Are there clear boundaries between different structures or \
         phases?",
    ),
    (
        TemplateCategory::ExternalEnvironment,
        "Is there any evidence of the nanomaterial interacting with its surrounding environment \
         or matrix (e.g., solvents, polymers, or other materials)? Are there other structures \
         or objects in the image that are not nanomaterials? If so, what are they?",
    ),
    (
        TemplateCategory::Technique,
        "What imaging technique was used to capture this image (e.g., SEM, TEM)? Were there any \
         post-processing or modifications made to the image (e.g., false coloring, 3D \
         rendering)?",
    ),
    (
        TemplateCategory::Functional,
        "If applicable, are there any functional features visible (e.g., active sites, regions \
         with distinct properties)? Are there dynamic processes captured in the image or is it \
         a static representation?",
    ),
    (
        TemplateCategory::ContextApplication,
        "What is the intended application or use of the nanomaterial being depicted? Is this an \
         experimental sample, or a theoretical or simulation-based representation?",
    ),
];

/// Render all ten templates for a material hint. The hint lands in the header
/// sentence of every question; rendering is deterministic.
pub fn render_templates(material_hint: &str) -> Vec<RenderedPrompt> {
    BODIES
        .iter()
        .map(|(category, body)| RenderedPrompt {
            category: *category,
            question: format!(
                "This is an electron micrograph of a {material_hint} sample. {body}"
            ),
        })
        .collect()
}
