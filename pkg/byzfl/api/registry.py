from typing import List

from fastapi import APIRouter, HTTPException, status

from byzfl import aggregators, attacks
from byzfl.models import MODEL_DESCRIPTIONS
from byzfl.schemas import RegistryEntry

router = APIRouter()


class RegistryService:
    """Names, descriptions and annotations of everything a config can select"""

    @staticmethod
    def entries(kind: str) -> List[RegistryEntry]:
        if kind == "aggregators":
            return [RegistryEntry(name=n, description=d, annotation=c) for n, d, c in aggregators.registry()]
        if kind == "attacks":
            return [
                RegistryEntry(name=n, description=d, annotation=f"level {level}")
                for n, d, level in attacks.registry()
            ]
        if kind == "models":
            return [RegistryEntry(name=n, description=d) for n, d in MODEL_DESCRIPTIONS.items()]
        raise ValueError(f"unknown registry kind {kind!r}")


@router.get("/registry/{kind}", response_model=List[RegistryEntry])
async def list_registry(kind: str):
    """List aggregators, attacks or models"""
    try:
        return RegistryService.entries(kind)
    except ValueError as e:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=str(e))
