"""Latent-group survival models: parametric mixtures and Cox mixtures."""

from .coxmix import (CMHEModel, CoxMixtureModel, DCMModel, EMConfig, cmhe_fit,
                     cmhe_predict_latent_phi, dcm_fit, dcm_predict_survival, mixture_from_dict)
from .dsm import (DSMModel, component_loglik, component_survival, dsm_fit, dsm_objective,
                  dsm_predict_latent_z, dsm_predict_survival)

__all__ = [
    "CMHEModel", "CoxMixtureModel", "DCMModel", "EMConfig", "cmhe_fit", "cmhe_predict_latent_phi",
    "dcm_fit", "dcm_predict_survival", "mixture_from_dict", "DSMModel", "component_loglik",
    "component_survival", "dsm_fit", "dsm_objective", "dsm_predict_latent_z",
    "dsm_predict_survival",
]
