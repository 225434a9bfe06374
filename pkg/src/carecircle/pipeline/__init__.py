"""Generate/verify orchestration over permission-limited context."""
from .backends import BackendUnavailable, ManifestEntry, MockInsightsBackend, RemoteBackend, TurnManifest
from .engine import (BriefingRejection, CareEngine, ConsentDenied, EnginePolicy, FALLBACK_SIGNATURE,
                     RateLimitExceeded, RateLimiter, estimate_confidence, fallback_draft, generate_briefings,
                     load_guidelines, needs_notification)
from .evidence import acl_predicate, index_prior_output, index_profile
from .templates import (Template, TemplateError, TemplateSet, extract_tasks, load_templates, template_fill,
                        template_paths)
from .types import (Briefing, Claim, EvidenceItem, InsightDraft, Observation, PromptBundle, QueryRequest,
                    Recommendation, ResponseContext, SchemaError, Task, Verdict)
from .verify import OracleVerifier, extract_claims, find_evidence, provenance_closure, required_level, verify_claim

__all__ = [n for n in dir() if not n.startswith("_")]
