"""Regulation-grounded action selection for automated driving.

Traffic rules are retrieved from region-specific regulation corpora with a
paragraph-then-sentence embedding cascade, then a chat model judges every
candidate action for compliance and safety with cited rule ids.
"""

from .corpus import (Corpus, FigureLabel, Paragraph, RegulationDocument, Section, Sentence,
                     SourceTier, load_corpus, parse_document, segment_sentences,
                     serialize_document)
from .reasoning import (ActionVerdict, Backends, DecisionOutput, Mode, Pipeline, RuleKind,
                        RuleRef, decide, filter_and_classify, judge_action)
from .retrieval import (ParagraphIndex, RetrievalParams, RetrievalResult, ScoredSentence,
                        build_index, load_index, persist_index, retrieve)
from .scenario import (ACTION_SPACE, Action, GlobalIntent, RetrievalQuery, ScenarioCase,
                       build_retrieval_query, extract_action_set, load_scenario)

__version__ = "0.1.0"
