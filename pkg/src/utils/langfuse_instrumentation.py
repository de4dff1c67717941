"""Langfuse instrumentation setup for rankstack."""

import logging
import os

from utils.config import AppConfig

logger = logging.getLogger(__name__)


def initialize_langfuse(config: AppConfig) -> bool:
    """Initialize Langfuse tracing of boosting runs.

    Args:
        config: Application configuration with Langfuse settings

    Returns:
        True if initialization successful, False otherwise
    """
    if not config.langfuse.enabled:
        logger.debug("Langfuse tracing disabled")
        return False

    try:
        os.environ["LANGFUSE_PUBLIC_KEY"] = config.langfuse.public_key
        os.environ["LANGFUSE_SECRET_KEY"] = config.langfuse.secret_key
        os.environ["LANGFUSE_HOST"] = config.langfuse.host

        # Import after setting environment variables
        from langfuse import Langfuse

        langfuse = Langfuse()

        # Verify authentication
        if not langfuse.auth_check():
            logger.warning("Langfuse authentication failed - check your keys")
            return False

        logger.info(f"Langfuse tracing enabled (environment: {config.langfuse.environment})")
        return True

    except Exception as e:
        logger.warning(f"Failed to initialize Langfuse: {e}")
        return False


def flush_langfuse() -> None:
    """Flush pending Langfuse events.

    Call this before the process exits so traces of short runs are sent.
    """
    try:
        from langfuse.decorators import langfuse_context

        langfuse_context.flush()
        logger.debug("Langfuse events flushed")
    except Exception as e:
        logger.warning(f"Error flushing Langfuse: {e}")
