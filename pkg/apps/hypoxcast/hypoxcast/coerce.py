"""Lenient coercions so key=value config text can address list and tuple fields"""
from typing import Annotated, Any

from pydantic import BeforeValidator


def split_csv(value: Any) -> Any:
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


FloatList = Annotated[list[float], BeforeValidator(split_csv)]
IntList = Annotated[list[int], BeforeValidator(split_csv)]
StrList = Annotated[list[str], BeforeValidator(split_csv)]
IntPair = Annotated[tuple[int, int], BeforeValidator(split_csv)]
FloatTriple = Annotated[tuple[float, float, float], BeforeValidator(split_csv)]
FloatPair = Annotated[tuple[float, float], BeforeValidator(split_csv)]
