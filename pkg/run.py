#!/usr/bin/env python3
"""
Startup script for the Byzantine FL Simulator API
"""

import uvicorn
from byzfl.config import settings

if __name__ == "__main__":
    print("🚀 Starting Byzantine FL Simulator API...")
    print(f"📚 API Documentation: http://localhost:{settings.api_port}/docs")
    print(f"🏥 Health Check: http://localhost:{settings.api_port}/health")
    print("\nPress Ctrl+C to stop the server\n")

    uvicorn.run(
        "byzfl.main:app",
        host=settings.api_host,
        port=settings.api_port,
        reload=True,
        log_level="info"
    )
