"""Multi-channel meeting separation and diarization front-end.

Classical building blocks for meeting transcription front-ends: WPE
dereverberation, guided cACGMM mask estimation (GSS), mask-based MVDR
beamforming, spectral-clustering diarization with staged prior refinement,
and DER / tcpWER / SI-SDR scoring, plus a synthetic meeting simulator that
provides ground truth for all of them.
"""
__version__ = "0.1.0"

from .spectral import (FeatureSequence, MultiChannelWave, Spectrogram, StftConfig, apply_mask,
                       istft, logmel_features, stft)
from .dereverb import WpeConfig, dereverberate, wpe
from .maskmodel import (ActivityMatrix, CacgmmConfig, TFMask, guided_cacgmm, rectify_activity,
                        sliding_window_gss)
from .spatial import BeamWeights, SpatialCovariance, beamform, estimate_psd, mvdr_weights
from .diarize import (Annotation, EmbeddingSequence, Segment, average_posteriors,
                      estimate_speaker_count, extract_embeddings, overlap_segments, recluster,
                      spectral_cluster)
from .scoring import (DerBreakdown, TcpWerReport, WordSegment, combine_der, der, si_sdr,
                      tcpwer)
from .simulate import SimConfig, SimSession, ideal_ratio_mask, simulate_session
from .config import PipelineConfig, load_config
