from .utils import *