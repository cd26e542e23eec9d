"""Imputation method discovery and management."""

import importlib
import inspect
import logging
from pathlib import Path

from rich.console import Console

from .errors import MethodModelMismatch
from .imputers.base import ImputerBase


class ImputerManager:
    """
    Discovers, loads, and manages available imputation methods.

    Every imputers/*_imputer.py module contributes the ImputerBase subclass it
    defines; the method name is the file stem without the suffix.
    """

    def __init__(self):
        """Initialize the manager and discover available methods."""
        self._imputers = {}
        self._discover_imputers()

    def _discover_imputers(self):
        imputers_dir = Path(__file__).parent / "imputers"
        for file_path in sorted(imputers_dir.glob("*_imputer.py")):
            module_name = file_path.stem
            try:
                module = importlib.import_module(f".imputers.{module_name}", package="latentfill")
                for _, obj in inspect.getmembers(module, inspect.isclass):
                    if issubclass(obj, ImputerBase) and not inspect.isabstract(obj) and obj is not ImputerBase:
                        method_name = module_name.removesuffix("_imputer")
                        self._imputers[method_name] = obj
                        logging.info(f"Discovered imputation method: {method_name}")
                        break
            except Exception as e:
                logging.error(f"Failed to load imputer module {module_name}: {e}", exc_info=True)

    def get_available_methods(self) -> list[str]:
        """
        Get the names of the available imputation methods.

        Returns:
            list[str]: Sorted method names
        """
        return sorted(self._imputers)

    def create_imputer(self, name: str, console: Console | None = None, device: str | None = None) -> ImputerBase:
        """
        Create an instance of the named imputation method.

        Args:
            name: Method name, e.g. 'replacement' or 'guidance_latent'
            console: Rich console instance for user feedback
            device: Torch device name

        Returns:
            ImputerBase: The imputer

        Raises:
            MethodModelMismatch: No method of that name exists
        """
        imputer_class = self._imputers.get(name)
        if imputer_class is None:
            raise MethodModelMismatch(
                f"Unknown imputation method '{name}' (available: {', '.join(self.get_available_methods())})"
            )
        return imputer_class(console, device=device)


def method_for_model(model: str) -> str:
    """Default imputation method for each model family of the sweep."""
    return {"ddpm": "guidance_pixel", "ldm": "guidance_latent", "em": "em"}[model]


def methods_for_model(model: str) -> list[str]:
    """Every method a sweep cell evaluates, default first; the rest are baselines on the same checkpoints."""
    return {
        "ddpm": ["guidance_pixel", "replacement"],
        "ldm": ["guidance_latent", "autoencoder"],
        "em": ["em"],
    }[model]
