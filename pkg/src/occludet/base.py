"""Estimator parameter protocol, compatible with scikit-learn conventions.

Estimators declare every hyperparameter as an ``__init__`` keyword and store
it under the same attribute name; fitted state carries a trailing underscore.
``get_params``/``set_params`` follow the sklearn contract, so the estimators
work with ``sklearn.base.clone`` and pipeline-style tooling without this
package importing sklearn.
"""

from __future__ import annotations

import inspect


class ParamsMixin:
    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [
            name
            for name, p in sig.parameters.items()
            if name != "self" and p.kind in (p.POSITIONAL_OR_KEYWORD, p.KEYWORD_ONLY)
        ]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(
                    f"invalid parameter {name!r} for {type(self).__name__}; "
                    f"valid parameters are {sorted(valid)}"
                )
            setattr(self, name, value)
        return self
